use std::collections::{BTreeMap, BTreeSet};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::Json;
use chrono::{DateTime, Utc};
use codeaudit_core::api::{
    AlertRecord, Cooccurrence, Dashboard, FacetReport, FacetRequest, IcrReport, JobAccepted,
    OverlapMatrix, Overview, ResolutionAdvice, ResolutionRecord, ResolveDisagreement,
    SuggestResolution,
};
use codeaudit_core::icr::{
    build_rating_matrix, classify_disagreements, resolution_suggestion, summarize, CodedSpan,
    Disagreement, DocumentCoding, DEFAULT_ALIGN_THRESHOLD,
};
use codeaudit_core::provider::{CodeReflection, Severity};
use codeaudit_core::scoring::cosine;
use codeaudit_core::vector_store::ConsistencyScoreRecord;
use serde::Deserialize;
use serde_json::json;
use uuid::Uuid;

use super::{member_project, AuthUser};
use crate::error::ApiError;
use crate::queue::Job;
use crate::state::AppState;
use crate::store::{Change, EditHistoryEntry};

fn ensure_code(state: &AppState, project_id: Uuid, code_id: Uuid) -> Result<(), ApiError> {
    state
        .store
        .read(|s| {
            s.codes
                .get(&code_id)
                .is_some_and(|c| c.project_id == project_id)
        })
        .then_some(())
        .ok_or_else(|| ApiError::not_found("code"))
}

pub async fn reflections(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path((project_id, code_id)): Path<(Uuid, Uuid)>,
) -> Result<Json<Vec<CodeReflection>>, ApiError> {
    member_project(&state, project_id, user)?;
    ensure_code(&state, project_id, code_id)?;
    Ok(Json(state.auditor.reflections().history(code_id)))
}

pub async fn get_facets(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path((project_id, code_id)): Path<(Uuid, Uuid)>,
) -> Result<Json<FacetReport>, ApiError> {
    member_project(&state, project_id, user)?;
    ensure_code(&state, project_id, code_id)?;
    state
        .facets
        .lock()
        .get(&(project_id, code_id))
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found("facet result"))
}

/// Queues facet discovery over the caller's segments for a code. The result
/// arrives as a `facet_ready` event.
pub async fn request_facets(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path((project_id, code_id)): Path<(Uuid, Uuid)>,
    body: Option<Json<FacetRequest>>,
) -> Result<(StatusCode, Json<JobAccepted>), ApiError> {
    member_project(&state, project_id, user)?;
    ensure_code(&state, project_id, code_id)?;
    let seed = body.and_then(|Json(b)| b.seed).unwrap_or(0);
    let id = Uuid::new_v4();
    state.queue.enqueue(Job::Facets {
        id,
        project_id,
        code_id,
        user_id: user,
        seed,
    });
    Ok((StatusCode::ACCEPTED, Json(JobAccepted { job_id: id })))
}

#[derive(Debug, Default, Deserialize)]
pub struct AlertQuery {
    code_id: Option<Uuid>,
    #[serde(default)]
    include_dismissed: bool,
}

/// The caller's own alerts, newest first.
pub async fn list_alerts(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
    Query(q): Query<AlertQuery>,
) -> Result<Json<Vec<AlertRecord>>, ApiError> {
    member_project(&state, project_id, user)?;
    let mut alerts: Vec<AlertRecord> = state.store.read(|s| {
        s.alerts
            .values()
            .filter(|a| a.alert.project_id == project_id && a.alert.user_id == user)
            .filter(|a| q.code_id.is_none_or(|c| a.alert.code_id == c))
            .filter(|a| q.include_dismissed || a.dismissed_at.is_none())
            .cloned()
            .collect()
    });
    alerts.sort_by_key(|a| std::cmp::Reverse(a.alert.created_at));
    Ok(Json(alerts))
}

pub async fn dismiss_alert(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path((project_id, alert_id)): Path<(Uuid, Uuid)>,
) -> Result<Json<AlertRecord>, ApiError> {
    member_project(&state, project_id, user)?;
    let owned = state.store.read(|s| {
        s.alerts
            .get(&alert_id)
            .is_some_and(|a| a.alert.project_id == project_id && a.alert.user_id == user)
    });
    if !owned {
        return Err(ApiError::not_found("alert"));
    }
    state.store.commit(
        Some(user),
        Change::AlertDismissed {
            alert_id,
            at: Utc::now(),
        },
    )?;
    state
        .store
        .read(|s| s.alerts.get(&alert_id).cloned())
        .map(Json)
        .ok_or_else(|| ApiError::not_found("alert"))
}

#[derive(Debug, Default, Deserialize)]
pub struct ScoreQuery {
    code_id: Option<Uuid>,
    user_id: Option<Uuid>,
    since: Option<DateTime<Utc>>,
}

fn project_scores(
    state: &AppState,
    project_id: Uuid,
    code: Option<Uuid>,
    since: Option<DateTime<Utc>>,
) -> Vec<ConsistencyScoreRecord> {
    let codes: Vec<Uuid> = match code {
        Some(c) => vec![c],
        None => state
            .store
            .read(|s| s.project_codes(project_id).iter().map(|c| c.id).collect()),
    };
    let mut out: Vec<ConsistencyScoreRecord> = codes
        .into_iter()
        .flat_map(|c| {
            state
                .auditor
                .vectors()
                .score_history(c, since)
                .unwrap_or_default()
        })
        .filter(|r| r.project_id == project_id)
        .collect();
    out.sort_by_key(|r| r.created_at);
    out
}

/// Chronological consistency scores for the project.
pub async fn score_history(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
    Query(q): Query<ScoreQuery>,
) -> Result<Json<Vec<ConsistencyScoreRecord>>, ApiError> {
    member_project(&state, project_id, user)?;
    if let Some(c) = q.code_id {
        ensure_code(&state, project_id, c)?;
    }
    let mut scores = project_scores(&state, project_id, q.code_id, q.since);
    if let Some(u) = q.user_id {
        scores.retain(|r| r.user_id == u);
    }
    Ok(Json(scores))
}

pub async fn get_score(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path((project_id, score_id)): Path<(Uuid, Uuid)>,
) -> Result<Json<ConsistencyScoreRecord>, ApiError> {
    member_project(&state, project_id, user)?;
    project_scores(&state, project_id, None, None)
        .into_iter()
        .find(|r| r.id == score_id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found("score record"))
}

/// Score records are append-only.
pub async fn reject_score_mutation(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path((project_id, score_id)): Path<(Uuid, Uuid)>,
) -> Result<StatusCode, ApiError> {
    member_project(&state, project_id, user)?;
    Err(ApiError::new(
        StatusCode::CONFLICT,
        "immutable_history",
        format!("score record {score_id} cannot be changed or removed"),
    ))
}

/// Agreement statistics and pairwise disagreements over every coder who has
/// coded in the project.
pub fn icr_report(state: &AppState, project_id: Uuid) -> IcrReport {
    let (docs, coders) = state.store.read(|s| {
        let mut docs: BTreeMap<Uuid, DocumentCoding> = BTreeMap::new();
        let mut coders = BTreeSet::new();
        for seg in s.project_segments(project_id) {
            coders.insert(seg.coder_id);
            let doc = docs
                .entry(seg.document_id)
                .or_insert_with(|| DocumentCoding {
                    document_id: seg.document_id,
                    coders: Vec::new(),
                    spans: Vec::new(),
                });
            if !doc.coders.contains(&seg.coder_id) {
                doc.coders.push(seg.coder_id);
            }
            doc.spans
                .extend(seg.code_ids.iter().map(|&code_id| CodedSpan {
                    segment_id: seg.id,
                    coder_id: seg.coder_id,
                    code_id,
                    start: seg.char_start,
                    end: seg.char_end,
                }));
        }
        (
            docs.into_values().collect::<Vec<_>>(),
            coders.into_iter().collect::<Vec<_>>(),
        )
    });

    let mut disagreements: Vec<Disagreement> = Vec::new();
    for doc in &docs {
        let mut present = doc.coders.clone();
        present.sort();
        for (i, &a) in present.iter().enumerate() {
            for &b in &present[i + 1..] {
                let spans_of = |c: Uuid| -> Vec<CodedSpan> {
                    doc.spans
                        .iter()
                        .filter(|s| s.coder_id == c)
                        .cloned()
                        .collect()
                };
                let (sa, sb) = (spans_of(a), spans_of(b));
                disagreements.extend(classify_disagreements(
                    doc.document_id,
                    (a, &sa),
                    (b, &sb),
                    DEFAULT_ALIGN_THRESHOLD,
                ));
            }
        }
    }

    let coder_names: Vec<String> = coders.iter().map(Uuid::to_string).collect();
    if coders.len() < 2 {
        return IcrReport {
            summary: None,
            items: Vec::new(),
            coders: coder_names,
            categories: Vec::new(),
            disagreements,
            empty_reason: Some("agreement needs at least two coders".into()),
        };
    }
    match build_rating_matrix(&docs, &coders, DEFAULT_ALIGN_THRESHOLD) {
        Ok(matrix) => IcrReport {
            summary: Some(summarize(&matrix)),
            items: matrix.items.clone(),
            coders: matrix.coders.clone(),
            categories: matrix.categories.clone(),
            disagreements,
            empty_reason: None,
        },
        Err(e) => IcrReport {
            summary: None,
            items: Vec::new(),
            coders: coder_names,
            categories: Vec::new(),
            disagreements,
            empty_reason: Some(e.to_string()),
        },
    }
}

pub async fn get_icr(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
) -> Result<Json<IcrReport>, ApiError> {
    member_project(&state, project_id, user)?;
    Ok(Json(icr_report(&state, project_id)))
}

/// Advice only: nothing about the coding changes.
pub async fn suggest_resolution(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
    Json(body): Json<SuggestResolution>,
) -> Result<Json<ResolutionAdvice>, ApiError> {
    member_project(&state, project_id, user)?;
    let d = &body.disagreement;
    let context = state.store.read(|s| {
        let doc = s
            .documents
            .get(&d.document_id)
            .filter(|x| x.project_id == project_id)?;
        let text: Vec<String> = d
            .spans
            .iter()
            .map(|&(a, b)| codeaudit_core::pipeline::context::span_text(&doc.body, a, b))
            .collect();
        let codes: Vec<_> = d
            .codes
            .iter()
            .filter_map(|c| s.codes.get(c))
            .map(|c| json!({ "id": c.id, "name": c.name, "definition": c.definition }))
            .collect();
        Some(json!({ "document": doc.title, "span_text": text, "codes": codes }))
    });
    let context = context.ok_or_else(|| ApiError::not_found("document"))?;
    let suggestion = resolution_suggestion(state.auditor.gateway(), d, context).await;
    Ok(Json(ResolutionAdvice {
        suggestion,
        applied: false,
    }))
}

pub async fn list_resolutions(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
) -> Result<Json<Vec<ResolutionRecord>>, ApiError> {
    member_project(&state, project_id, user)?;
    let mut out: Vec<ResolutionRecord> = state.store.read(|s| {
        s.resolutions
            .values()
            .filter(|r| r.project_id == project_id)
            .cloned()
            .collect()
    });
    out.sort_by_key(|r| r.resolved_at);
    Ok(Json(out))
}

pub async fn resolve_disagreement(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
    Json(body): Json<ResolveDisagreement>,
) -> Result<(StatusCode, Json<ResolutionRecord>), ApiError> {
    member_project(&state, project_id, user)?;
    let known_doc = state.store.read(|s| {
        s.documents
            .get(&body.disagreement.document_id)
            .is_some_and(|d| d.project_id == project_id)
    });
    if !known_doc {
        return Err(ApiError::not_found("document"));
    }
    let record = ResolutionRecord {
        id: Uuid::new_v4(),
        project_id,
        disagreement: body.disagreement,
        action: body.action,
        note: body.note,
        resolved_by: user,
        resolved_at: Utc::now(),
    };
    state
        .store
        .commit(Some(user), Change::DisagreementResolved(record.clone()))?;
    Ok((StatusCode::CREATED, Json(record)))
}

pub async fn dashboard(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
) -> Result<Json<Dashboard>, ApiError> {
    let project = member_project(&state, project_id, user)?;
    let scores = project_scores(&state, project_id, None, None);
    let (overview, codes, cooccurrence) = state.store.read(|s| {
        let segments = s.project_segments(project_id);
        let coders: BTreeSet<Uuid> = segments.iter().map(|x| x.coder_id).collect();
        let mut open_alerts: BTreeMap<Severity, usize> = BTreeMap::new();
        for a in s.alerts.values() {
            if a.alert.project_id == project_id
                && a.alert.user_id == user
                && a.dismissed_at.is_none()
            {
                *open_alerts.entry(a.alert.severity).or_default() += 1;
            }
        }
        let mut pairs: BTreeMap<(Uuid, Uuid), usize> = BTreeMap::new();
        for seg in &segments {
            let mut ids = seg.code_ids.clone();
            ids.sort();
            for (i, a) in ids.iter().enumerate() {
                for b in &ids[i + 1..] {
                    *pairs.entry((*a, *b)).or_default() += 1;
                }
            }
        }
        let codes: Vec<Uuid> = s.project_codes(project_id).iter().map(|c| c.id).collect();
        let overview = Overview {
            documents: s.project_documents(project_id).len(),
            codes: codes.len(),
            segments: segments.len(),
            coders: coders.len(),
            open_alerts,
            score_records: scores.len(),
        };
        let co = pairs
            .into_iter()
            .map(|((code_a, code_b), count)| Cooccurrence {
                code_a,
                code_b,
                count,
            })
            .collect::<Vec<_>>();
        (overview, codes, co)
    });

    let mut timeline: BTreeMap<Uuid, Vec<ConsistencyScoreRecord>> = BTreeMap::new();
    for r in scores {
        timeline.entry(r.code_id).or_default().push(r);
    }

    let centroids = if state.auditor.vectors().has_collection(user) {
        state
            .auditor
            .code_centroids(user, &codes, Utc::now())
            .map_err(|e| ApiError::internal(e.to_string()))?
    } else {
        Vec::new()
    };
    let by_code: BTreeMap<Uuid, _> = centroids.iter().map(|c| (c.code_id, &c.mu)).collect();
    let values = codes
        .iter()
        .map(|a| {
            codes
                .iter()
                .map(|b| match (by_code.get(a), by_code.get(b)) {
                    (Some(x), Some(y)) => cosine(x, y).ok(),
                    _ => None,
                })
                .collect()
        })
        .collect();
    Ok(Json(Dashboard {
        overview,
        timeline,
        overlap: OverlapMatrix {
            codes,
            values,
            threshold: project.settings.overlap_threshold,
        },
        cooccurrence,
    }))
}

#[derive(Debug, Default, Deserialize)]
pub struct HistoryQuery {
    #[serde(default)]
    after: u64,
}

pub async fn history(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
    Query(q): Query<HistoryQuery>,
) -> Result<Json<Vec<EditHistoryEntry>>, ApiError> {
    member_project(&state, project_id, user)?;
    Ok(Json(state.store.project_history(project_id, q.after)))
}
