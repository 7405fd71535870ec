//! Closed schemas for structured model output and their validators.
//!
//! Validators never return a partially populated value: either every field
//! checks out or the full list of problems comes back for the repair prompt.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use uuid::Uuid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentAlignment {
    Aligned,
    Partial,
    Misaligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Info => "info",
            Severity::Warning => "warning",
            Severity::Critical => "critical",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub consistency_score: f64,
    pub intent_alignment: IntentAlignment,
    pub severity: Severity,
    pub headline: String,
    pub finding: String,
    pub drift_warning: Option<String>,
    pub action_suggestion: String,
    /// Ids of existing codes the model suggested instead.
    pub alternative_codes: Vec<Uuid>,
    pub justification: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeReflection {
    pub code_id: Uuid,
    pub evolving_definition: String,
    pub theoretical_lens: String,
    pub derivation_trace: String,
    pub sample_size: usize,
    pub version: u32,
    pub created_at: DateTime<Utc>,
}

/// The three text fields a reflection completion must supply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionBody {
    pub evolving_definition: String,
    pub theoretical_lens: String,
    pub derivation_trace: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionAction {
    AdoptA,
    AdoptB,
    Merge,
    NewCode,
    Discuss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionSuggestion {
    pub action: ResolutionAction,
    pub suggestion: String,
}

/// A code the model may mention by name or id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownCode {
    pub id: Uuid,
    pub name: String,
}

/// Pulls the JSON object out of a completion, tolerating code fences and
/// leading prose.
pub fn extract_object(raw: &str) -> Result<Map<String, Value>, Vec<String>> {
    let start = raw.find('{');
    let end = raw.rfind('}');
    let slice = match (start, end) {
        (Some(s), Some(e)) if e > s => &raw[s..=e],
        _ => return Err(vec!["response does not contain a JSON object".into()]),
    };
    match serde_json::from_str::<Value>(slice) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(vec!["top-level JSON value must be an object".into()]),
        Err(e) => Err(vec![format!("invalid JSON: {e}")]),
    }
}

struct Fields<'a> {
    map: &'a Map<String, Value>,
    errors: Vec<String>,
}

impl<'a> Fields<'a> {
    fn new(map: &'a Map<String, Value>, allowed: &[&str]) -> Self {
        let mut errors = Vec::new();
        let mut unknown: Vec<_> = map
            .keys()
            .filter(|k| !allowed.contains(&k.as_str()))
            .collect();
        unknown.sort();
        for k in unknown {
            errors.push(format!("unexpected field `{k}`"));
        }
        Self { map, errors }
    }

    fn text(&mut self, key: &str) -> Option<String> {
        match self.map.get(key) {
            Some(Value::String(s)) if !s.trim().is_empty() => Some(s.trim().to_string()),
            Some(Value::String(_)) => {
                self.errors.push(format!("`{key}` must not be empty"));
                None
            }
            Some(_) => {
                self.errors.push(format!("`{key}` must be a string"));
                None
            }
            None => {
                self.errors.push(format!("missing required field `{key}`"));
                None
            }
        }
    }

    fn optional_text(&mut self, key: &str) -> Option<String> {
        match self.map.get(key) {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) if s.trim().is_empty() => None,
            Some(Value::String(s)) => Some(s.trim().to_string()),
            Some(_) => {
                self.errors
                    .push(format!("`{key}` must be a string or null"));
                None
            }
        }
    }

    fn unit_interval(&mut self, key: &str) -> Option<f64> {
        match self.map.get(key).and_then(Value::as_f64) {
            Some(x) if x.is_finite() && (0.0..=1.0).contains(&x) => Some(x),
            Some(x) => {
                self.errors
                    .push(format!("`{key}` must lie in [0, 1], got {x}"));
                None
            }
            None => {
                self.errors.push(format!("`{key}` must be a number"));
                None
            }
        }
    }

    fn choice<T: for<'de> Deserialize<'de>>(&mut self, key: &str, allowed: &str) -> Option<T> {
        let value = self.map.get(key).cloned();
        match value.map(serde_json::from_value::<T>) {
            Some(Ok(v)) => Some(v),
            _ => {
                self.errors
                    .push(format!("`{key}` must be one of {allowed}"));
                None
            }
        }
    }

    fn finish<T>(self, value: Option<T>) -> Result<T, Vec<String>> {
        match value {
            Some(v) if self.errors.is_empty() => Ok(v),
            _ => Err(self.errors),
        }
    }
}

const VERDICT_FIELDS: &[&str] = &[
    "consistency_score",
    "intent_alignment",
    "severity",
    "headline",
    "finding",
    "drift_warning",
    "action_suggestion",
    "alternative_codes",
    "justification",
];

/// Validates an audit completion against the closed verdict schema.
///
/// Alternative codes that do not resolve to a known code (by id or
/// case-insensitive name) are dropped with a warning rather than failing the
/// verdict.
pub fn parse_verdict(raw: &str, known: &[KnownCode]) -> Result<AuditVerdict, Vec<String>> {
    let map = extract_object(raw)?;
    let mut f = Fields::new(&map, VERDICT_FIELDS);
    let score = f.unit_interval("consistency_score");
    let intent = f.choice::<IntentAlignment>("intent_alignment", "aligned|partial|misaligned");
    let severity = f.choice::<Severity>("severity", "info|warning|critical");
    let headline = f.text("headline");
    let finding = f.text("finding");
    let drift_warning = f.optional_text("drift_warning");
    let action = f.text("action_suggestion");
    let justification = f.optional_text("justification");

    let mut alternatives = Vec::new();
    match map.get("alternative_codes") {
        None | Some(Value::Null) => {}
        Some(Value::Array(items)) => {
            for item in items {
                let Some(s) = item.as_str() else {
                    f.errors
                        .push("`alternative_codes` entries must be strings".into());
                    continue;
                };
                let hit = known.iter().find(|k| {
                    k.name.eq_ignore_ascii_case(s.trim())
                        || Uuid::parse_str(s.trim()).is_ok_and(|id| id == k.id)
                });
                match hit {
                    Some(k) if !alternatives.contains(&k.id) => alternatives.push(k.id),
                    Some(_) => {}
                    None => tracing::warn!(code = s, "dropping unknown alternative code"),
                }
            }
        }
        Some(_) => f.errors.push("`alternative_codes` must be an array".into()),
    }

    let verdict = (|| {
        Some(AuditVerdict {
            consistency_score: score?,
            intent_alignment: intent?,
            severity: severity?,
            headline: headline?,
            finding: finding?,
            drift_warning,
            action_suggestion: action?,
            alternative_codes: alternatives,
            justification,
        })
    })();
    f.finish(verdict)
}

pub fn parse_reflection(raw: &str) -> Result<ReflectionBody, Vec<String>> {
    let map = extract_object(raw)?;
    let mut f = Fields::new(
        &map,
        &[
            "evolving_definition",
            "theoretical_lens",
            "derivation_trace",
        ],
    );
    let def = f.text("evolving_definition");
    let lens = f.text("theoretical_lens");
    let trace = f.text("derivation_trace");
    let body = (|| {
        Some(ReflectionBody {
            evolving_definition: def?,
            theoretical_lens: lens?,
            derivation_trace: trace?,
        })
    })();
    f.finish(body)
}

pub const MAX_LABEL_CHARS: usize = 60;

pub fn parse_label(raw: &str) -> Result<String, Vec<String>> {
    let map = extract_object(raw)?;
    let mut f = Fields::new(&map, &["label"]);
    let label = f
        .text("label")
        .map(|l| l.chars().take(MAX_LABEL_CHARS).collect::<String>());
    f.finish(label)
}

pub fn parse_resolution(raw: &str) -> Result<ResolutionSuggestion, Vec<String>> {
    let map = extract_object(raw)?;
    let mut f = Fields::new(&map, &["action", "suggestion"]);
    let action = f.choice::<ResolutionAction>("action", "adopt_a|adopt_b|merge|new_code|discuss");
    let suggestion = f.text("suggestion");
    let out = (|| {
        Some(ResolutionSuggestion {
            action: action?,
            suggestion: suggestion?,
        })
    })();
    f.finish(out)
}
