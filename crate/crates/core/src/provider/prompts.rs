//! Versioned prompt templates. Each template is hashed so audit records can
//! point at the exact text that produced them.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Audit,
    Reflection,
    FacetLabel,
    Resolution,
}

pub struct Template {
    pub name: &'static str,
    pub body: &'static str,
    pub schema: &'static str,
}

const SPLIT: &str = "=== user ===";

const AUDIT: Template = Template {
    name: "audit_v1",
    body: include_str!("../../prompts/audit_v1.txt"),
    schema: r#"{"consistency_score": number in [0,1], "intent_alignment": "aligned"|"partial"|"misaligned", "severity": "info"|"warning"|"critical", "headline": string, "finding": string, "drift_warning": string|null, "action_suggestion": string, "alternative_codes": [code name], "justification": string|null}"#,
};

const REFLECTION: Template = Template {
    name: "reflection_v1",
    body: include_str!("../../prompts/reflection_v1.txt"),
    schema: r#"{"evolving_definition": string, "theoretical_lens": string, "derivation_trace": string}"#,
};

const FACET_LABEL: Template = Template {
    name: "facet_label_v1",
    body: include_str!("../../prompts/facet_label_v1.txt"),
    schema: r#"{"label": string}"#,
};

const RESOLUTION: Template = Template {
    name: "resolution_v1",
    body: include_str!("../../prompts/resolution_v1.txt"),
    schema: r#"{"action": "adopt_a"|"adopt_b"|"merge"|"new_code"|"discuss", "suggestion": string}"#,
};

pub fn template(task: Task) -> &'static Template {
    match task {
        Task::Audit => &AUDIT,
        Task::Reflection => &REFLECTION,
        Task::FacetLabel => &FACET_LABEL,
        Task::Resolution => &RESOLUTION,
    }
}

impl Template {
    /// Hex sha256 of the template body.
    pub fn hash(&self) -> &'static str {
        static HASHES: OnceLock<[String; 4]> = OnceLock::new();
        let hashes = HASHES.get_or_init(|| {
            [AUDIT, REFLECTION, FACET_LABEL, RESOLUTION].map(|t| {
                Sha256::digest(t.body.as_bytes())
                    .iter()
                    .map(|b| format!("{b:02x}"))
                    .collect()
            })
        });
        let idx = match self.name {
            "audit_v1" => 0,
            "reflection_v1" => 1,
            "facet_label_v1" => 2,
            _ => 3,
        };
        &hashes[idx]
    }

    /// Returns `(system, user)` messages with placeholders filled in.
    pub fn render(&self, context: &serde_json::Value, vars: &[(&str, String)]) -> (String, String) {
        let (system, user) = self
            .body
            .split_once(SPLIT)
            .unwrap_or((self.body, "{{context}}"));
        let pretty = serde_json::to_string_pretty(context).unwrap_or_default();
        let fill = |s: &str| {
            let mut out = s.trim().replace("{{schema}}", self.schema);
            out = out.replace("{{context}}", &pretty);
            for (k, v) in vars {
                out = out.replace(&format!("{{{{{k}}}}}"), v);
            }
            out
        };
        (fill(system), fill(user))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_are_stable_and_distinct() {
        let a = template(Task::Audit).hash();
        assert_eq!(a.len(), 64);
        assert_eq!(a, template(Task::Audit).hash());
        assert_ne!(a, template(Task::Reflection).hash());
    }

    #[test]
    fn render_fills_placeholders() {
        let ctx = serde_json::json!({"stage1": {"centroid_similarity": 0.8}});
        let (system, user) =
            template(Task::Audit).render(&ctx, &[("grounding_band", "0.15".into())]);
        assert!(system.contains("0.15"));
        assert!(system.contains("consistency_score"));
        assert!(!system.contains("{{"));
        assert!(user.contains("centroid_similarity"));
    }
}
