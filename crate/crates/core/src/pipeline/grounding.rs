use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingOutcome {
    pub final_score: f64,
    /// A deterministic similarity was available to ground against.
    pub grounded: bool,
    /// The model's score fell outside the band and was pulled to its edge.
    pub clamped: bool,
}

/// Constrains a model score to `centroid_similarity ± band`, intersected
/// with `[0, 1]`.
///
/// `llm_score` must already lie in `[0, 1]`. Without a similarity the model
/// score passes through ungrounded. When the similarity is below `-band` the
/// band and `[0, 1]` do not intersect; the score is then pinned to 0.
pub fn enforce_grounding(
    llm_score: f64,
    centroid_similarity: Option<f64>,
    band: f64,
) -> GroundingOutcome {
    let Some(sim) = centroid_similarity else {
        return GroundingOutcome {
            final_score: llm_score,
            grounded: false,
            clamped: false,
        };
    };
    if (llm_score - sim).abs() <= band {
        return GroundingOutcome {
            final_score: llm_score,
            grounded: true,
            clamped: false,
        };
    }
    let edge = if llm_score > sim {
        sim + band
    } else {
        sim - band
    };
    let mut final_score = edge.clamp(0.0, 1.0);
    // sim ± band can round one ulp outside the band
    while (final_score - sim).abs() > band && final_score > 0.0 && final_score < 1.0 {
        final_score = if final_score > sim {
            final_score.next_down()
        } else {
            final_score.next_up()
        };
    }
    GroundingOutcome {
        final_score,
        grounded: true,
        clamped: true,
    }
}
