mod account;
mod coding;
mod insight;
mod portability;
mod projects;
mod push;

use axum::extract::{DefaultBodyLimit, FromRequestParts, State};
use axum::http::header::AUTHORIZATION;
use axum::http::request::Parts;
use axum::routing::{get, post, put};
use axum::{Json, Router};
use codeaudit_core::api::Project;
use serde_json::{json, Value};
use uuid::Uuid;

use crate::error::ApiError;
use crate::state::AppState;

pub use insight::icr_report;
pub use portability::{Manifest, ARCHIVE_FORMAT, ARCHIVE_VERSION};

const IMPORT_LIMIT_BYTES: usize = 512 * 1024 * 1024;

/// The authenticated caller. Tokens come from `Authorization: Bearer …` or,
/// for browsers opening a socket, a `token` query parameter.
pub struct AuthUser(pub Uuid);

impl FromRequestParts<AppState> for AuthUser {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, ApiError> {
        let header = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim);
        let query = parts.uri.query().and_then(|q| {
            q.split('&')
                .filter_map(|kv| kv.split_once('='))
                .find(|(k, _)| *k == "token")
                .map(|(_, v)| v)
        });
        let token = header
            .or(query)
            .ok_or_else(|| ApiError::unauthorized("missing token"))?;
        Ok(AuthUser(state.sessions.resolve(token)?))
    }
}

/// Caller's view of a project; non-members get the same answer as for a
/// project that does not exist.
pub(crate) fn member_project(
    state: &AppState,
    project_id: Uuid,
    user: Uuid,
) -> Result<Project, ApiError> {
    state.store.read(|s| {
        s.projects
            .get(&project_id)
            .filter(|_| s.is_member(project_id, user))
            .cloned()
            .ok_or_else(|| ApiError::not_found("project"))
    })
}

pub(crate) fn owned_project(
    state: &AppState,
    project_id: Uuid,
    user: Uuid,
) -> Result<Project, ApiError> {
    let p = member_project(state, project_id, user)?;
    if p.owner != user {
        return Err(ApiError::forbidden("only the project owner can do this"));
    }
    Ok(p)
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "pending_jobs": state.queue.pending() }))
}

pub fn router(state: AppState) -> Router {
    let project = Router::new()
        .route("/", get(projects::get_project))
        .route(
            "/members",
            get(projects::list_members).post(projects::add_member),
        )
        .route(
            "/settings",
            get(projects::get_settings).patch(projects::update_settings),
        )
        .route(
            "/documents",
            get(coding::list_documents).post(coding::upload_document),
        )
        .route("/documents/{document_id}", get(coding::get_document))
        .route("/codes", get(coding::list_codes).post(coding::create_code))
        .route(
            "/codes/{code_id}",
            axum::routing::patch(coding::update_code).delete(coding::delete_code),
        )
        .route("/codes/{code_id}/reflections", get(insight::reflections))
        .route(
            "/codes/{code_id}/facets",
            get(insight::get_facets).post(insight::request_facets),
        )
        .route(
            "/segments",
            get(coding::list_segments).post(coding::apply_code),
        )
        .route(
            "/segments/{segment_id}",
            axum::routing::delete(coding::delete_segment),
        )
        .route("/alerts", get(insight::list_alerts))
        .route("/alerts/{alert_id}/dismiss", post(insight::dismiss_alert))
        .route("/scores", get(insight::score_history))
        .route(
            "/scores/{score_id}",
            put(insight::reject_score_mutation)
                .patch(insight::reject_score_mutation)
                .delete(insight::reject_score_mutation)
                .get(insight::get_score),
        )
        .route("/icr", get(insight::get_icr))
        .route("/icr/suggestions", post(insight::suggest_resolution))
        .route(
            "/icr/resolutions",
            get(insight::list_resolutions).post(insight::resolve_disagreement),
        )
        .route("/dashboard", get(insight::dashboard))
        .route("/history", get(insight::history))
        .route("/export", get(portability::export))
        .route("/events", get(push::events));

    Router::new()
        .route("/health", get(health))
        .route("/api/auth/register", post(account::register))
        .route("/api/auth/login", post(account::login))
        .route("/api/auth/logout", post(account::logout))
        .route("/api/me", get(account::me))
        .route(
            "/api/projects",
            get(projects::list_projects).post(projects::create_project),
        )
        .route(
            "/api/import",
            post(portability::import).layer(DefaultBodyLimit::max(IMPORT_LIMIT_BYTES)),
        )
        .nest("/api/projects/{project_id}", project)
        .with_state(state)
}
