//! The three-stage audit run on every coding decision.
//!
//! Stage 1 embeds the segment and scores it against the coder's own history
//! for the code. Stage 2 asks the reasoning model for a verdict and pins its
//! score to the Stage-1 similarity. Stage 3 periodically rewrites the code's
//! reflection, which later Stage-2 contexts carry.

mod config;
pub mod context;
pub mod grounding;
pub mod mmr;
pub mod reflection;
pub mod siblings;

use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

pub use config::{AuditConfig, FieldError, MAX_REFLECTION_SAMPLE};
pub use context::{PriorSegment, SelectedBy};
pub use grounding::{enforce_grounding, GroundingOutcome};
pub use mmr::{mmr_select, Candidate};
pub use reflection::{maybe_schedule_reflection, ReflectionStore, ReflectionStoreError};
pub use siblings::{sibling_reaudit, AuditJob, SpanRef};

use crate::provider::prompts::{self, Task};
use crate::provider::{
    CodeReflection, Gateway, IntentAlignment, KnownCode, ProviderError, Severity,
};
use crate::scoring::{
    classify_band_with, code_centroid, cosine, pairwise_overlap, resolve_centroid, temporal_drift,
    Band, CodeCentroid, DriftReport, EmbeddingVector, OverlapPair, ScoringError,
};
use crate::vector_store::{
    AuditTrigger, ConsistencyScoreRecord, SegmentEmbeddingRecord, StoreError, VectorStore,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Reflection(#[from] ReflectionStoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeInfo {
    pub id: Uuid,
    pub name: String,
    pub definition: Option<String>,
}

/// Everything the pipeline needs to know about one coded segment.
#[derive(Debug, Clone)]
pub struct SegmentInput {
    pub project_id: Uuid,
    pub user_id: Uuid,
    pub segment_id: Uuid,
    pub document_id: Uuid,
    pub code: CodeInfo,
    pub text: String,
    pub surrounding_text: String,
    pub coded_at: DateTime<Utc>,
    /// The project's full codebook, used for overlap and alternative codes.
    pub project_codes: Vec<CodeInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftLevel {
    None,
    Note,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Metrics {
    /// `None` when the code has neither enough history nor a definition.
    pub centroid_similarity: Option<f64>,
    pub band: Option<Band>,
    pub drift: DriftReport,
    pub drift_level: DriftLevel,
    /// Fewer than `tau_min` prior segments.
    pub cold_start: bool,
    pub pseudo_centroid: bool,
    pub prior_count: usize,
    pub segment_count: usize,
    /// Centroid pairs involving this code.
    pub overlaps: Vec<OverlapPair>,
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub metrics: Stage1Metrics,
    pub embedding: EmbeddingVector,
    /// The `(segment, code)` pair was new to the collection.
    pub inserted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditContext {
    pub stage1: Stage1Metrics,
    pub code: CodeInfo,
    pub segment_text: String,
    pub surrounding_text: String,
    pub prior_segments: Vec<PriorSegment>,
    pub reflection: Option<CodeReflection>,
    pub config: AuditConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditAlert {
    pub id: Uuid,
    pub project_id: Uuid,
    pub user_id: Uuid,
    pub segment_id: Uuid,
    pub code_id: Uuid,
    pub trigger: AuditTrigger,
    /// Grounded final score.
    pub consistency_score: Option<f64>,
    pub llm_score: Option<f64>,
    pub intent_alignment: Option<IntentAlignment>,
    pub severity: Severity,
    pub headline: String,
    pub finding: String,
    /// Model-written drift warning, if any.
    pub drift_warning: Option<String>,
    /// Deterministic drift annotation from the Stage-1 thresholds.
    pub drift_note: Option<String>,
    pub action_suggestion: String,
    pub alternative_codes: Vec<Uuid>,
    pub justification: Option<String>,
    pub stage1: Stage1Metrics,
    pub grounded: bool,
    pub clamped: bool,
    /// The model verdict was unusable; only Stage-1 evidence is shown.
    pub deterministic_only: bool,
    /// No deterministic evidence existed; severity is capped at info.
    pub advisory_only: bool,
    pub score_record_id: Uuid,
    pub prompt_hash: Option<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct AuditOutcome {
    pub alert: AuditAlert,
    pub record: ConsistencyScoreRecord,
    pub reflection: Option<CodeReflection>,
}

/// Severity used when no model verdict is available.
pub fn severity_for_band(band: Option<Band>) -> Severity {
    match band {
        Some(Band::Flagged) => Severity::Critical,
        Some(Band::Moderate) => Severity::Warning,
        Some(Band::Strong) | None => Severity::Info,
    }
}

pub fn drift_level(report: &DriftReport, config: &AuditConfig) -> DriftLevel {
    match report.delta {
        Some(d) if d >= config.drift_warn_threshold => DriftLevel::Warning,
        Some(d) if d >= config.drift_note_threshold => DriftLevel::Note,
        _ => DriftLevel::None,
    }
}

pub struct Auditor {
    gateway: Arc<Gateway>,
    vectors: Arc<VectorStore>,
    reflections: Arc<ReflectionStore>,
}

impl Auditor {
    pub fn new(
        gateway: Arc<Gateway>,
        vectors: Arc<VectorStore>,
        reflections: Arc<ReflectionStore>,
    ) -> Self {
        Self {
            gateway,
            vectors,
            reflections,
        }
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn vectors(&self) -> &Arc<VectorStore> {
        &self.vectors
    }

    pub fn reflections(&self) -> &Arc<ReflectionStore> {
        &self.reflections
    }

    /// Real centroids for every listed code the user has coded at least once.
    pub fn code_centroids(
        &self,
        user_id: Uuid,
        code_ids: &[Uuid],
        at: DateTime<Utc>,
    ) -> Result<Vec<CodeCentroid>, PipelineError> {
        let mut out = Vec::new();
        for &code_id in code_ids {
            let vecs: Vec<_> = self
                .vectors
                .records_for_code(user_id, code_id)?
                .into_iter()
                .map(|r| r.vector)
                .collect();
            if vecs.is_empty() {
                continue;
            }
            match code_centroid(code_id, &vecs, at) {
                Ok(c) => out.push(c),
                Err(ScoringError::DegenerateCentroid) => {
                    tracing::warn!(%code_id, "skipping degenerate centroid");
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(out)
    }

    pub async fn run_stage1(
        &self,
        input: &SegmentInput,
        config: &AuditConfig,
    ) -> Result<Stage1Outcome, PipelineError> {
        let now = Utc::now();
        let embedding = self.gateway.embed_text(&input.text).await?;
        if !self.vectors.has_collection(input.user_id) {
            self.vectors
                .create_collection(input.user_id, embedding.dim())?;
        }
        let history = self
            .vectors
            .records_for_code(input.user_id, input.code.id)?;
        // score against the centroid of prior segments only
        let prior: Vec<EmbeddingVector> = history
            .iter()
            .filter(|r| r.segment_id != input.segment_id)
            .map(|r| r.vector.clone())
            .collect();
        let cold_start = prior.len() < config.tau_min;

        let definition = input
            .code
            .definition
            .as_deref()
            .map(str::trim)
            .filter(|d| !d.is_empty());
        let definition_embedding = match (cold_start, definition) {
            (true, Some(def)) => Some(self.gateway.embed_text(def).await?),
            _ => None,
        };
        let centroid = match resolve_centroid(
            input.code.id,
            &prior,
            definition_embedding.as_ref(),
            config.tau_min,
            now,
        ) {
            Ok(c) => Some(c),
            Err(ScoringError::ColdStartUnavailable { .. }) => None,
            Err(ScoringError::DegenerateCentroid) => {
                tracing::warn!(code_id = %input.code.id, "degenerate centroid, no similarity");
                None
            }
            Err(e) => return Err(e.into()),
        };
        let centroid_similarity = centroid
            .as_ref()
            .map(|c| cosine(&embedding, &c.mu))
            .transpose()?;
        let band = centroid_similarity.map(|s| classify_band_with(s, config.bands()).band);

        let inserted = self
            .vectors
            .get(input.user_id, input.segment_id, input.code.id)?
            .is_none();
        self.vectors
            .upsert_segment_embedding(SegmentEmbeddingRecord {
                segment_id: input.segment_id,
                user_id: input.user_id,
                code_id: input.code.id,
                document_id: input.document_id,
                vector: embedding.clone(),
                coded_at: input.coded_at,
                text: input.text.clone(),
            })?;

        let ordered: Vec<EmbeddingVector> = self
            .vectors
            .records_for_code(input.user_id, input.code.id)?
            .into_iter()
            .map(|r| r.vector)
            .collect();
        let drift =
            temporal_drift(input.code.id, &ordered, config.drift(), now).unwrap_or_else(|e| {
                tracing::warn!(error = %e, "drift not computable");
                DriftReport {
                    code_id: input.code.id,
                    delta: None,
                    window_size: config.drift_window,
                    segment_count: ordered.len(),
                    computed_at: now,
                    applicable: false,
                }
            });

        let code_ids: Vec<Uuid> = input.project_codes.iter().map(|c| c.id).collect();
        let centroids = self.code_centroids(input.user_id, &code_ids, now)?;
        let overlaps = pairwise_overlap(&centroids, config.overlap_threshold)?
            .into_iter()
            .filter(|p| p.code_a == input.code.id || p.code_b == input.code.id)
            .collect();

        Ok(Stage1Outcome {
            metrics: Stage1Metrics {
                centroid_similarity,
                band,
                drift_level: drift_level(&drift, config),
                drift,
                cold_start,
                pseudo_centroid: centroid.as_ref().is_some_and(|c| c.is_pseudo),
                prior_count: prior.len(),
                segment_count: ordered.len(),
                overlaps,
            },
            embedding,
            inserted,
        })
    }

    pub fn assemble_context(
        &self,
        input: &SegmentInput,
        stage1: &Stage1Outcome,
        config: &AuditConfig,
    ) -> Result<AuditContext, PipelineError> {
        let history: Vec<_> = self
            .vectors
            .records_for_code(input.user_id, input.code.id)?
            .into_iter()
            .filter(|r| r.segment_id != input.segment_id)
            .collect();
        let sims: Vec<f64> = history
            .iter()
            .map(|r| cosine(&stage1.embedding, &r.vector))
            .collect::<Result<_, _>>()?;
        let candidates: Vec<_> = history
            .iter()
            .zip(&sims)
            .map(|(r, &similarity)| context::PriorCandidate {
                vector: &r.vector,
                similarity,
                coded_at: r.coded_at,
            })
            .collect();
        let prior_segments = context::select_prior_segments(&candidates, config)
            .into_iter()
            .map(|(i, selected_by)| PriorSegment {
                segment_id: history[i].segment_id,
                text: history[i].text.clone(),
                similarity: sims[i],
                coded_at: history[i].coded_at,
                selected_by,
            })
            .collect();
        Ok(AuditContext {
            stage1: stage1.metrics.clone(),
            code: input.code.clone(),
            segment_text: input.text.clone(),
            surrounding_text: input.surrounding_text.clone(),
            prior_segments,
            reflection: self.reflections.latest(input.code.id),
            config: config.clone(),
        })
    }

    /// Gets a verdict, grounds it, appends the score record and returns the
    /// alert. Provider failures degrade to a deterministic-only alert.
    pub async fn run_stage2(
        &self,
        input: &SegmentInput,
        context: &AuditContext,
        trigger: AuditTrigger,
        config: &AuditConfig,
    ) -> Result<(AuditAlert, ConsistencyScoreRecord), PipelineError> {
        let metrics = &context.stage1;
        let sim = metrics.centroid_similarity;
        let known: Vec<KnownCode> = input
            .project_codes
            .iter()
            .filter(|c| c.id != input.code.id)
            .map(|c| KnownCode {
                id: c.id,
                name: c.name.clone(),
            })
            .collect();
        let payload = serde_json::to_value(context).expect("context serialises");
        let verdict = self
            .gateway
            .audit_completion(&payload, &known, config.grounding_band)
            .await;

        let now = Utc::now();
        let advisory_only = sim.is_none();
        let drift_note =
            match metrics.drift_level {
                DriftLevel::None => None,
                level => metrics.drift.delta.map(|d| {
                    format!(
                    "{} drift for `{}`: δ = {d:.3} between the {} oldest and {} newest segments.",
                    if level == DriftLevel::Warning { "Significant" } else { "Mild" },
                    input.code.name,
                    metrics.drift.window_size,
                    metrics.drift.window_size,
                )
                }),
            };
        let prompt_hash = Some(prompts::template(Task::Audit).hash().to_string());

        let mut alert = match verdict {
            Ok(v) => {
                let g = enforce_grounding(v.consistency_score, sim, config.grounding_band);
                AuditAlert {
                    id: Uuid::new_v4(),
                    project_id: input.project_id,
                    user_id: input.user_id,
                    segment_id: input.segment_id,
                    code_id: input.code.id,
                    trigger,
                    consistency_score: Some(g.final_score),
                    llm_score: Some(v.consistency_score),
                    intent_alignment: Some(v.intent_alignment),
                    severity: v.severity,
                    headline: v.headline,
                    finding: v.finding,
                    drift_warning: v.drift_warning,
                    drift_note,
                    action_suggestion: v.action_suggestion,
                    alternative_codes: v.alternative_codes,
                    justification: v.justification,
                    stage1: metrics.clone(),
                    grounded: g.grounded,
                    clamped: g.clamped,
                    deterministic_only: false,
                    advisory_only,
                    score_record_id: Uuid::new_v4(),
                    prompt_hash,
                    created_at: now,
                }
            }
            Err(e) => {
                tracing::warn!(error = %e, segment_id = %input.segment_id, "falling back to deterministic-only alert");
                deterministic_alert(input, metrics, trigger, drift_note, now)
            }
        };
        if advisory_only {
            alert.severity = alert.severity.min(Severity::Info);
        } else if metrics.drift_level == DriftLevel::Warning {
            alert.severity = alert.severity.max(Severity::Warning);
        }

        let record = ConsistencyScoreRecord {
            id: alert.score_record_id,
            project_id: input.project_id,
            user_id: input.user_id,
            segment_id: input.segment_id,
            code_id: input.code.id,
            centroid_similarity: sim,
            drift_delta: metrics.drift.delta,
            band: metrics.band,
            llm_score: alert.llm_score,
            final_score: alert.consistency_score,
            grounded: alert.grounded,
            clamped: alert.clamped,
            pseudo_centroid: metrics.pseudo_centroid,
            trigger,
            prompt_hash: alert.prompt_hash.clone(),
            created_at: now,
        };
        self.vectors.register_code(input.code.id);
        self.vectors.append_consistency_score(record.clone())?;
        Ok((alert, record))
    }

    /// Samples up to `reflection_sample_max` of the code's segments by MMR
    /// against its centroid and stores the next reflection version.
    pub async fn run_stage3(
        &self,
        user_id: Uuid,
        code: &CodeInfo,
        config: &AuditConfig,
    ) -> Result<CodeReflection, PipelineError> {
        let records = self.vectors.records_for_code(user_id, code.id)?;
        let vecs: Vec<EmbeddingVector> = records.iter().map(|r| r.vector.clone()).collect();
        let centroid = crate::scoring::centroid(&vecs)?;
        let sims: Vec<f64> = vecs
            .iter()
            .map(|v| cosine(v, &centroid))
            .collect::<Result<_, _>>()?;
        let candidates: Vec<Candidate<'_>> = records
            .iter()
            .zip(&sims)
            .map(|(r, &relevance)| Candidate {
                vector: &r.vector,
                relevance,
                coded_at: r.coded_at,
            })
            .collect();
        let k = records
            .len()
            .min(config.reflection_sample_max.min(MAX_REFLECTION_SAMPLE));
        let picked = mmr_select(&candidates, k, config.reflection_mmr_lambda);
        let prior = self.reflections.latest(code.id);
        let payload = serde_json::json!({
            "code": code,
            "segments": picked.iter().map(|&i| serde_json::json!({
                "text": records[i].text,
                "coded_at": records[i].coded_at,
                "similarity_to_centroid": sims[i],
            })).collect::<Vec<_>>(),
            "prior_reflection": prior,
        });
        let reflection = self
            .gateway
            .reflect_completion(
                code.id,
                &payload,
                picked.len(),
                prior.as_ref().map(|r| r.version),
                Utc::now(),
            )
            .await?;
        self.reflections.insert(reflection.clone())?;
        Ok(reflection)
    }

    /// Full audit of one `(segment, code)`. A reflection runs afterwards when
    /// a new segment brings the code to a cadence point; its failure is
    /// logged and never fails the audit.
    pub async fn process(
        &self,
        input: &SegmentInput,
        trigger: AuditTrigger,
        config: &AuditConfig,
    ) -> Result<AuditOutcome, PipelineError> {
        let stage1 = self.run_stage1(input, config).await?;
        let context = self.assemble_context(input, &stage1, config)?;
        let (alert, record) = self.run_stage2(input, &context, trigger, config).await?;
        let due = trigger == AuditTrigger::NewCode
            && stage1.inserted
            && maybe_schedule_reflection(stage1.metrics.segment_count, config);
        let reflection = if due {
            match self.run_stage3(input.user_id, &input.code, config).await {
                Ok(r) => Some(r),
                Err(e) => {
                    tracing::warn!(error = %e, code_id = %input.code.id, "reflection failed");
                    None
                }
            }
        } else {
            None
        };
        Ok(AuditOutcome {
            alert,
            record,
            reflection,
        })
    }
}

fn deterministic_alert(
    input: &SegmentInput,
    metrics: &Stage1Metrics,
    trigger: AuditTrigger,
    drift_note: Option<String>,
    now: DateTime<Utc>,
) -> AuditAlert {
    let sim = metrics.centroid_similarity;
    let (headline, finding) = match (sim, metrics.band) {
        (Some(s), Some(band)) => (
            format!("Similarity {s:.2} to `{}` ({band})", input.code.name),
            format!(
                "Deterministic score only: this segment's similarity to the {} for `{}` is {s:.3}.",
                if metrics.pseudo_centroid { "code definition" } else { "centroid of your prior segments" },
                input.code.name
            ),
        ),
        _ => (
            format!("No history yet for `{}`", input.code.name),
            "The code has too few segments and no definition, so no deterministic score exists yet."
                .to_string(),
        ),
    };
    AuditAlert {
        id: Uuid::new_v4(),
        project_id: input.project_id,
        user_id: input.user_id,
        segment_id: input.segment_id,
        code_id: input.code.id,
        trigger,
        consistency_score: sim.map(|s| s.clamp(0.0, 1.0)),
        llm_score: None,
        intent_alignment: None,
        severity: severity_for_band(metrics.band),
        headline,
        finding,
        drift_warning: None,
        drift_note,
        action_suggestion: match metrics.band {
            Some(Band::Flagged) => {
                "Compare this segment with your earlier uses of the code.".into()
            }
            Some(Band::Moderate) => "Check whether this segment fits the code's definition.".into(),
            _ => "No action needed.".into(),
        },
        alternative_codes: Vec::new(),
        justification: None,
        stage1: metrics.clone(),
        grounded: false,
        clamped: false,
        deterministic_only: true,
        advisory_only: sim.is_none(),
        score_record_id: Uuid::new_v4(),
        prompt_hash: None,
        created_at: now,
    }
}
