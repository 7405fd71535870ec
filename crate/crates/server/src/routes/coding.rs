use std::collections::HashSet;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::Json;
use chrono::Utc;
use codeaudit_core::api::{
    ApplyCode, ApplyCodeResponse, CodeRecord, CreateCode, CreateDocument, DocumentRecord,
    EventKind, SegmentRecord, UpdateCode,
};
use codeaudit_core::pipeline::{sibling_reaudit, AuditJob, SpanRef};
use codeaudit_core::vector_store::AuditTrigger;
use uuid::Uuid;

use super::{member_project, AuthUser};
use crate::error::ApiError;
use crate::state::AppState;
use crate::store::Change;

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
];

pub async fn list_documents(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
) -> Result<Json<Vec<DocumentRecord>>, ApiError> {
    member_project(&state, project_id, user)?;
    Ok(Json(state.store.read(|s| {
        s.project_documents(project_id)
            .into_iter()
            .cloned()
            .collect()
    })))
}

pub async fn upload_document(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
    Json(body): Json<CreateDocument>,
) -> Result<(StatusCode, Json<DocumentRecord>), ApiError> {
    member_project(&state, project_id, user)?;
    if body.title.trim().is_empty() {
        return Err(ApiError::validation("document title is required"));
    }
    let doc = DocumentRecord {
        id: Uuid::new_v4(),
        project_id,
        title: body.title.trim().to_string(),
        body: body.body,
        uploaded_at: Utc::now(),
    };
    state
        .store
        .commit(Some(user), Change::DocumentUploaded(doc.clone()))?;
    Ok((StatusCode::CREATED, Json(doc)))
}

pub async fn get_document(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path((project_id, document_id)): Path<(Uuid, Uuid)>,
) -> Result<Json<DocumentRecord>, ApiError> {
    member_project(&state, project_id, user)?;
    state
        .store
        .read(|s| {
            s.documents
                .get(&document_id)
                .filter(|d| d.project_id == project_id)
                .cloned()
        })
        .map(Json)
        .ok_or_else(|| ApiError::not_found("document"))
}

pub async fn list_codes(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
) -> Result<Json<Vec<CodeRecord>>, ApiError> {
    member_project(&state, project_id, user)?;
    Ok(Json(state.store.read(|s| {
        s.project_codes(project_id).into_iter().cloned().collect()
    })))
}

fn clean_definition(d: Option<String>) -> Option<String> {
    d.map(|s| s.trim().to_string()).filter(|s| !s.is_empty())
}

pub async fn create_code(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
    Json(body): Json<CreateCode>,
) -> Result<(StatusCode, Json<CodeRecord>), ApiError> {
    member_project(&state, project_id, user)?;
    let name = body.name.trim();
    if name.is_empty() {
        return Err(ApiError::validation("code name is required"));
    }
    let existing = state.store.read(|s| s.project_codes(project_id).len());
    let code = CodeRecord {
        id: Uuid::new_v4(),
        project_id,
        name: name.to_string(),
        color: body
            .color
            .unwrap_or_else(|| PALETTE[existing % PALETTE.len()].to_string()),
        definition: clean_definition(body.definition),
        created_at: Utc::now(),
    };
    state
        .store
        .commit(Some(user), Change::CodeCreated(code.clone()))?;
    state.auditor.vectors().register_code(code.id);
    Ok((StatusCode::CREATED, Json(code)))
}

fn project_code(state: &AppState, project_id: Uuid, code_id: Uuid) -> Result<CodeRecord, ApiError> {
    state
        .store
        .read(|s| {
            s.codes
                .get(&code_id)
                .filter(|c| c.project_id == project_id)
                .cloned()
        })
        .ok_or_else(|| ApiError::not_found("code"))
}

pub async fn update_code(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path((project_id, code_id)): Path<(Uuid, Uuid)>,
    Json(body): Json<UpdateCode>,
) -> Result<Json<CodeRecord>, ApiError> {
    member_project(&state, project_id, user)?;
    let mut code = project_code(&state, project_id, code_id)?;
    if let Some(name) = body.name {
        let name = name.trim();
        if name.is_empty() {
            return Err(ApiError::validation("code name is required"));
        }
        code.name = name.to_string();
    }
    if let Some(color) = body.color {
        code.color = color;
    }
    if let Some(def) = body.definition {
        code.definition = clean_definition(def);
    }
    state
        .store
        .commit(Some(user), Change::CodeUpdated(code.clone()))?;
    Ok(Json(code))
}

pub async fn delete_code(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path((project_id, code_id)): Path<(Uuid, Uuid)>,
) -> Result<StatusCode, ApiError> {
    member_project(&state, project_id, user)?;
    let code = project_code(&state, project_id, code_id)?;
    state.store.commit(Some(user), Change::CodeDeleted(code))?;
    Ok(StatusCode::NO_CONTENT)
}

pub async fn list_segments(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
) -> Result<Json<Vec<SegmentRecord>>, ApiError> {
    member_project(&state, project_id, user)?;
    Ok(Json(state.store.read(|s| {
        s.project_segments(project_id)
            .into_iter()
            .cloned()
            .collect()
    })))
}

fn span_ref(s: &SegmentRecord) -> SpanRef {
    SpanRef {
        segment_id: s.id,
        document_id: s.document_id,
        coder_id: s.coder_id,
        start: s.char_start,
        end: s.char_end,
        code_ids: s.code_ids.clone(),
    }
}

/// Records a coded segment and queues its audits: one per applied code, then
/// one per code of each of the coder's own overlapping segments in the
/// document.
pub async fn apply_code(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
    Json(body): Json<ApplyCode>,
) -> Result<(StatusCode, Json<ApplyCodeResponse>), ApiError> {
    member_project(&state, project_id, user)?;
    if body.code_ids.is_empty() {
        return Err(ApiError::validation("at least one code is required"));
    }
    if body.code_ids.iter().collect::<HashSet<_>>().len() != body.code_ids.len() {
        return Err(ApiError::validation("code_ids contains duplicates"));
    }
    let (doc_len, unknown) = state.store.read(|s| {
        let doc = s
            .documents
            .get(&body.document_id)
            .filter(|d| d.project_id == project_id);
        let unknown = body
            .code_ids
            .iter()
            .any(|c| s.codes.get(c).is_none_or(|c| c.project_id != project_id));
        (doc.map(|d| d.body.chars().count()), unknown)
    });
    let doc_len = doc_len.ok_or_else(|| ApiError::not_found("document"))?;
    if unknown {
        return Err(ApiError::validation(
            "every code must belong to this project",
        ));
    }
    if body.char_start >= body.char_end || body.char_end > doc_len {
        return Err(ApiError::validation(format!(
            "span must satisfy 0 <= char_start < char_end <= {doc_len}"
        )));
    }
    let now = Utc::now();
    let segment = SegmentRecord {
        id: Uuid::new_v4(),
        project_id,
        document_id: body.document_id,
        char_start: body.char_start,
        char_end: body.char_end,
        code_ids: body.code_ids,
        coder_id: user,
        created_at: now,
    };
    state
        .store
        .commit(Some(user), Change::SegmentCreated(segment.clone()))?;

    let mut jobs: Vec<AuditJob> = segment
        .code_ids
        .iter()
        .map(|&code_id| AuditJob {
            id: Uuid::new_v4(),
            project_id,
            segment_id: segment.id,
            code_id,
            user_id: user,
            trigger: AuditTrigger::NewCode,
            enqueued_at: now,
        })
        .collect();
    let existing: Vec<SpanRef> = state.store.read(|s| {
        s.project_segments(project_id)
            .into_iter()
            .filter(|x| x.document_id == segment.document_id && x.coder_id == user)
            .map(span_ref)
            .collect()
    });
    jobs.extend(sibling_reaudit(
        project_id,
        &span_ref(&segment),
        &existing,
        now,
    ));
    for job in &jobs {
        state.queue.enqueue_audit(job.clone());
    }
    publish_icr(&state, project_id);
    Ok((
        StatusCode::CREATED,
        Json(ApplyCodeResponse { segment, jobs }),
    ))
}

pub async fn delete_segment(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path((project_id, segment_id)): Path<(Uuid, Uuid)>,
) -> Result<StatusCode, ApiError> {
    let project = member_project(&state, project_id, user)?;
    let segment = state
        .store
        .read(|s| {
            s.segments
                .get(&segment_id)
                .filter(|x| x.project_id == project_id)
                .cloned()
        })
        .ok_or_else(|| ApiError::not_found("segment"))?;
    if segment.coder_id != user && project.owner != user {
        return Err(ApiError::forbidden(
            "only the coder or the project owner can remove a segment",
        ));
    }
    state
        .store
        .commit(Some(user), Change::SegmentDeleted(segment.clone()))?;
    if state.auditor.vectors().has_collection(segment.coder_id) {
        state
            .auditor
            .vectors()
            .remove_segment(segment.coder_id, segment.id)?;
    }
    publish_icr(&state, project_id);
    Ok(StatusCode::NO_CONTENT)
}

/// Pushes fresh agreement figures once a project has two or more coders.
fn publish_icr(state: &AppState, project_id: Uuid) {
    let report = super::icr_report(state, project_id);
    if report.coders.len() >= 2 {
        state.hub.publish(
            project_id,
            EventKind::IcrUpdated,
            serde_json::to_value(&report).expect("reports serialise"),
        );
    }
}
