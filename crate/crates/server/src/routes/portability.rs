//! Project archives: a gzipped tar of JSON files. Importing assigns fresh
//! ids throughout, so an archive can be imported next to its source.

use std::collections::{BTreeSet, HashMap};
use std::io::{Cursor, Read};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::Json;
use chrono::{DateTime, Utc};
use codeaudit_core::api::{
    AlertRecord, CodeRecord, DocumentRecord, Project, ResolutionRecord, SegmentRecord,
};
use codeaudit_core::provider::CodeReflection;
use codeaudit_core::vector_store::{ConsistencyScoreRecord, SegmentEmbeddingRecord};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use uuid::Uuid;

use super::{member_project, AuthUser};
use crate::error::ApiError;
use crate::state::AppState;
use crate::store::{Change, EditHistoryEntry, ProjectSnapshot};

pub const ARCHIVE_FORMAT: &str = "codeaudit-project";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub exported_at: DateTime<Utc>,
    pub exported_by: Uuid,
    pub project_id: Uuid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Archive {
    manifest: Manifest,
    project: Project,
    members: Vec<Uuid>,
    documents: Vec<DocumentRecord>,
    codes: Vec<CodeRecord>,
    segments: Vec<SegmentRecord>,
    alerts: Vec<AlertRecord>,
    resolutions: Vec<ResolutionRecord>,
    scores: Vec<ConsistencyScoreRecord>,
    reflections: Vec<CodeReflection>,
    /// The exporter's own embeddings for the project's segments.
    embeddings: Vec<SegmentEmbeddingRecord>,
    /// Kept for the record; not replayed on import.
    history: Vec<EditHistoryEntry>,
}

fn gather(state: &AppState, project_id: Uuid, user: Uuid) -> Result<Archive, ApiError> {
    let snapshot = state
        .store
        .read(|s| s.snapshot(project_id))
        .ok_or_else(|| ApiError::not_found("project"))?;
    let vectors = state.auditor.vectors();
    let doc_ids: BTreeSet<Uuid> = snapshot.documents.iter().map(|d| d.id).collect();
    let mut scores = Vec::new();
    let mut reflections = Vec::new();
    let mut embeddings = Vec::new();
    for code in &snapshot.codes {
        scores.extend(
            vectors
                .score_history(code.id, None)
                .unwrap_or_default()
                .into_iter()
                .filter(|r| r.project_id == project_id),
        );
        reflections.extend(state.auditor.reflections().history(code.id));
        if vectors.has_collection(user) {
            embeddings.extend(
                vectors
                    .records_for_code(user, code.id)?
                    .into_iter()
                    .filter(|r| doc_ids.contains(&r.document_id)),
            );
        }
    }
    scores.sort_by_key(|r| r.created_at);
    Ok(Archive {
        manifest: Manifest {
            format: ARCHIVE_FORMAT.into(),
            version: ARCHIVE_VERSION,
            exported_at: Utc::now(),
            exported_by: user,
            project_id,
        },
        project: snapshot.project,
        members: snapshot.members,
        documents: snapshot.documents,
        codes: snapshot.codes,
        segments: snapshot.segments,
        alerts: snapshot.alerts,
        resolutions: snapshot.resolutions,
        scores,
        reflections,
        embeddings,
        history: state.store.project_history(project_id, 0),
    })
}

fn pack(archive: &Archive) -> std::io::Result<Vec<u8>> {
    let mut tar = tar::Builder::new(GzEncoder::new(Vec::new(), Compression::default()));
    let mut add = |name: &str, value: Value| -> std::io::Result<()> {
        let bytes = serde_json::to_vec_pretty(&value)?;
        let mut header = tar::Header::new_gnu();
        header.set_size(bytes.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(archive.manifest.exported_at.timestamp().max(0) as u64);
        header.set_cksum();
        tar.append_data(&mut header, name, bytes.as_slice())
    };
    let Value::Object(parts) = serde_json::to_value(archive)? else {
        unreachable!("archives serialise to objects")
    };
    for (key, value) in parts {
        add(&format!("{key}.json"), value)?;
    }
    tar.into_inner()?.finish()
}

fn unpack(bytes: &[u8]) -> Result<Archive, ApiError> {
    let bad = |m: String| ApiError::validation(format!("invalid archive: {m}"));
    let mut tar = tar::Archive::new(GzDecoder::new(Cursor::new(bytes)));
    let mut parts = serde_json::Map::new();
    for entry in tar.entries().map_err(|e| bad(e.to_string()))? {
        let mut entry = entry.map_err(|e| bad(e.to_string()))?;
        let path = entry
            .path()
            .map_err(|e| bad(e.to_string()))?
            .to_string_lossy()
            .into_owned();
        let Some(key) = path.strip_suffix(".json") else {
            continue;
        };
        let key = key.to_string();
        let mut buf = Vec::new();
        entry
            .read_to_end(&mut buf)
            .map_err(|e| bad(e.to_string()))?;
        let value: Value = serde_json::from_slice(&buf).map_err(|e| bad(format!("{path}: {e}")))?;
        parts.insert(key, value);
    }
    let manifest: Manifest = field(&parts, "manifest").map_err(bad)?;
    if manifest.format != ARCHIVE_FORMAT || manifest.version != ARCHIVE_VERSION {
        return Err(bad(format!(
            "unsupported format {} version {}",
            manifest.format, manifest.version
        )));
    }
    serde_json::from_value(Value::Object(parts)).map_err(|e| bad(e.to_string()))
}

fn field<T: DeserializeOwned>(
    parts: &serde_json::Map<String, Value>,
    key: &str,
) -> Result<T, String> {
    let v = parts
        .get(key)
        .ok_or_else(|| format!("missing {key}.json"))?;
    serde_json::from_value(v.clone()).map_err(|e| format!("{key}.json: {e}"))
}

pub async fn export(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
) -> Result<impl IntoResponse, ApiError> {
    member_project(&state, project_id, user)?;
    let archive = gather(&state, project_id, user)?;
    let bytes = pack(&archive).map_err(|e| ApiError::internal(e.to_string()))?;
    let name = format!("attachment; filename=\"project-{project_id}.tar.gz\"");
    Ok((
        [
            (header::CONTENT_TYPE, "application/gzip".to_string()),
            (header::CONTENT_DISPOSITION, name),
        ],
        bytes,
    ))
}

/// Replaces every string that is a key of `ids` anywhere in `value`.
fn remap(value: &mut Value, ids: &HashMap<Uuid, Uuid>) {
    match value {
        Value::String(s) => {
            if let Some(new) = Uuid::parse_str(s).ok().and_then(|u| ids.get(&u)) {
                *s = new.to_string();
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|v| remap(v, ids)),
        Value::Object(map) => map.values_mut().for_each(|v| remap(v, ids)),
        _ => {}
    }
}

/// Creates a new project owned by the caller from an exported archive. The
/// exporter's coding, alerts, scores and embeddings become the caller's;
/// other coders keep their ids, and only members known here are kept.
pub async fn import(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    body: Bytes,
) -> Result<(StatusCode, Json<Project>), ApiError> {
    let mut archive = unpack(&body)?;
    let dim = state.auditor.gateway().dim();
    if archive.project.embedding_dim != dim {
        return Err(ApiError::validation(format!(
            "archive uses {}-dimensional embeddings; this server uses {dim}",
            archive.project.embedding_dim
        )));
    }
    // history is archival only and is not carried into the new project
    archive.history.clear();

    let mut ids: HashMap<Uuid, Uuid> = HashMap::new();
    let mut fresh = |id: Uuid| {
        ids.insert(id, Uuid::new_v4());
    };
    fresh(archive.project.id);
    archive.documents.iter().for_each(|x| fresh(x.id));
    archive.codes.iter().for_each(|x| fresh(x.id));
    archive.segments.iter().for_each(|x| fresh(x.id));
    archive.alerts.iter().for_each(|x| fresh(x.alert.id));
    archive.resolutions.iter().for_each(|x| fresh(x.id));
    archive.scores.iter().for_each(|x| fresh(x.id));
    ids.insert(archive.manifest.exported_by, user);
    ids.insert(archive.project.owner, user);

    let mut value =
        serde_json::to_value(&archive).map_err(|e| ApiError::internal(e.to_string()))?;
    remap(&mut value, &ids);
    let mut archive: Archive =
        serde_json::from_value(value).map_err(|e| ApiError::internal(e.to_string()))?;

    archive.project.owner = user;
    archive.project.created_at = Utc::now();
    let members: Vec<Uuid> = state.store.read(|s| {
        archive
            .members
            .iter()
            .copied()
            .filter(|m| *m != user && s.users.contains_key(m))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    });
    let project = archive.project.clone();
    state.store.commit(
        Some(user),
        Change::ProjectImported(Box::new(ProjectSnapshot {
            project: archive.project,
            members,
            documents: archive.documents,
            codes: archive.codes.clone(),
            segments: archive.segments,
            alerts: archive.alerts,
            resolutions: archive.resolutions,
        })),
    )?;

    let vectors = state.auditor.vectors();
    for code in &archive.codes {
        vectors.register_code(code.id);
    }
    for score in archive.scores {
        vectors.append_consistency_score(score)?;
    }
    archive.reflections.sort_by_key(|r| (r.code_id, r.version));
    for r in archive.reflections {
        state
            .auditor
            .reflections()
            .insert(r)
            .map_err(|e| ApiError::internal(e.to_string()))?;
    }
    if !archive.embeddings.is_empty() {
        vectors.create_collection(user, dim)?;
        for e in archive.embeddings {
            vectors.upsert_segment_embedding(SegmentEmbeddingRecord { user_id: user, ..e })?;
        }
    }
    Ok((StatusCode::CREATED, Json(project)))
}
