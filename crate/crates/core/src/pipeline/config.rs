use serde::{Deserialize, Serialize};

use crate::scoring::{BandThresholds, DriftParams};

/// Per-project audit settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    /// Below this many prior segments the definition stands in for the centroid.
    pub tau_min: usize,
    pub strong_threshold: f64,
    pub moderate_threshold: f64,
    pub overlap_threshold: f64,
    /// Maximum distance between the model's score and the centroid similarity.
    pub grounding_band: f64,
    pub drift_window: usize,
    pub drift_min_segments: usize,
    /// Drift at or above this raises a warning on the alert.
    pub drift_warn_threshold: f64,
    /// Drift at or above this is noted on the alert without raising severity.
    pub drift_note_threshold: f64,
    pub context_k: usize,
    pub mmr_lambda: f64,
    pub recency_quota: usize,
    pub surrounding_chars: usize,
    pub reflection_threshold: usize,
    pub reflection_every: usize,
    pub reflection_sample_max: usize,
    pub reflection_mmr_lambda: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            tau_min: 3,
            strong_threshold: 0.85,
            moderate_threshold: 0.65,
            overlap_threshold: 0.85,
            grounding_band: 0.15,
            drift_window: 5,
            drift_min_segments: 10,
            drift_warn_threshold: 0.35,
            drift_note_threshold: 0.15,
            context_k: 8,
            mmr_lambda: 0.7,
            recency_quota: 3,
            surrounding_chars: 400,
            reflection_threshold: 3,
            reflection_every: 3,
            reflection_sample_max: 30,
            reflection_mmr_lambda: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: &'static str,
    pub message: String,
}

/// Hard ceiling on the reflection sample.
pub const MAX_REFLECTION_SAMPLE: usize = 30;

impl AuditConfig {
    pub fn bands(&self) -> BandThresholds {
        BandThresholds {
            strong: self.strong_threshold,
            moderate: self.moderate_threshold,
        }
    }

    pub fn drift(&self) -> DriftParams {
        DriftParams {
            window: self.drift_window,
            min_segments: self.drift_min_segments,
        }
    }

    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errors = Vec::new();
        let mut check = |ok: bool, field: &'static str, message: String| {
            if !ok {
                errors.push(FieldError { field, message });
            }
        };
        let finite = [
            self.strong_threshold,
            self.moderate_threshold,
            self.overlap_threshold,
            self.grounding_band,
            self.drift_warn_threshold,
            self.drift_note_threshold,
            self.mmr_lambda,
            self.reflection_mmr_lambda,
        ]
        .iter()
        .all(|x| x.is_finite());
        check(
            finite,
            "config",
            "all thresholds must be finite numbers".into(),
        );
        check(
            0.0 <= self.moderate_threshold && self.moderate_threshold < self.strong_threshold,
            "moderate_threshold",
            format!(
                "must satisfy 0 <= moderate_threshold < strong_threshold (got {} and {})",
                self.moderate_threshold, self.strong_threshold
            ),
        );
        check(
            self.strong_threshold <= 1.0,
            "strong_threshold",
            format!("must be at most 1 (got {})", self.strong_threshold),
        );
        check(
            (-1.0..=1.0).contains(&self.overlap_threshold),
            "overlap_threshold",
            "must lie in [-1, 1]".into(),
        );
        check(
            self.grounding_band > 0.0 && self.grounding_band < 1.0,
            "grounding_band",
            "must lie in (0, 1)".into(),
        );
        check(self.tau_min >= 1, "tau_min", "must be at least 1".into());
        check(
            self.drift_window >= 1,
            "drift_window",
            "must be at least 1".into(),
        );
        check(
            self.drift_min_segments >= self.drift_window,
            "drift_min_segments",
            "must be at least drift_window".into(),
        );
        check(
            (0.0..=2.0).contains(&self.drift_note_threshold)
                && self.drift_note_threshold <= self.drift_warn_threshold
                && self.drift_warn_threshold <= 2.0,
            "drift_warn_threshold",
            "must satisfy 0 <= drift_note_threshold <= drift_warn_threshold <= 2".into(),
        );
        check(
            self.context_k >= 1,
            "context_k",
            "must be at least 1".into(),
        );
        check(
            (0.0..=1.0).contains(&self.mmr_lambda),
            "mmr_lambda",
            "must lie in [0, 1]".into(),
        );
        check(
            (0.0..=1.0).contains(&self.reflection_mmr_lambda),
            "reflection_mmr_lambda",
            "must lie in [0, 1]".into(),
        );
        check(
            self.recency_quota <= self.context_k,
            "recency_quota",
            "must not exceed context_k".into(),
        );
        check(
            self.reflection_threshold >= 1,
            "reflection_threshold",
            "must be at least 1".into(),
        );
        check(
            self.reflection_every >= 1,
            "reflection_every",
            "must be at least 1".into(),
        );
        check(
            (1..=MAX_REFLECTION_SAMPLE).contains(&self.reflection_sample_max),
            "reflection_sample_max",
            format!("must lie in [1, {MAX_REFLECTION_SAMPLE}]"),
        );
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Applies a partial update, validating the merged result.
    pub fn merge(&self, patch: &serde_json::Value) -> Result<AuditConfig, Vec<FieldError>> {
        let serde_json::Value::Object(patch) = patch else {
            return Err(vec![FieldError {
                field: "settings",
                message: "expected a JSON object".into(),
            }]);
        };
        let mut merged = serde_json::to_value(self).expect("config serialises");
        let obj = merged.as_object_mut().expect("config is an object");
        let mut errors = Vec::new();
        for (k, v) in patch {
            if !obj.contains_key(k) {
                errors.push(FieldError {
                    field: "settings",
                    message: format!("unknown setting `{k}`"),
                });
                continue;
            }
            obj.insert(k.clone(), v.clone());
        }
        if !errors.is_empty() {
            return Err(errors);
        }
        let config: AuditConfig = serde_json::from_value(merged).map_err(|e| {
            vec![FieldError {
                field: "settings",
                message: e.to_string(),
            }]
        })?;
        config.validate()?;
        Ok(config)
    }
}
