use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::Json;
use chrono::Utc;
use codeaudit_core::api::{AddMember, CreateProject, Member, Project, Role};
use codeaudit_core::pipeline::AuditConfig;
use serde_json::Value;
use uuid::Uuid;

use super::{member_project, owned_project, AuthUser};
use crate::error::ApiError;
use crate::state::AppState;
use crate::store::Change;

pub async fn list_projects(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
) -> Json<Vec<Project>> {
    Json(state.store.read(|s| {
        s.projects
            .values()
            .filter(|p| s.is_member(p.id, user))
            .cloned()
            .collect()
    }))
}

pub async fn create_project(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Json(body): Json<CreateProject>,
) -> Result<(StatusCode, Json<Project>), ApiError> {
    let name = body.name.trim();
    if name.is_empty() {
        return Err(ApiError::validation("project name is required"));
    }
    let settings = match &body.settings {
        Some(patch) => AuditConfig::default()
            .merge(patch)
            .map_err(ApiError::fields)?,
        None => AuditConfig::default(),
    };
    let project = Project {
        id: Uuid::new_v4(),
        owner: user,
        name: name.to_string(),
        settings,
        embedding_dim: state.auditor.gateway().dim(),
        created_at: Utc::now(),
    };
    state
        .store
        .commit(Some(user), Change::ProjectCreated(project.clone()))?;
    Ok((StatusCode::CREATED, Json(project)))
}

pub async fn get_project(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
) -> Result<Json<Project>, ApiError> {
    member_project(&state, project_id, user).map(Json)
}

pub async fn list_members(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
) -> Result<Json<Vec<Member>>, ApiError> {
    let project = member_project(&state, project_id, user)?;
    Ok(Json(state.store.read(|s| {
        let name = |id: Uuid| s.users.get(&id).map(|u| u.username.clone());
        std::iter::once(Member {
            user_id: project.owner,
            username: name(project.owner),
            role: Role::Owner,
        })
        .chain(s.project_members(project_id).into_iter().map(|id| Member {
            user_id: id,
            username: name(id),
            role: Role::Member,
        }))
        .collect()
    })))
}

pub async fn add_member(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
    Json(body): Json<AddMember>,
) -> Result<(StatusCode, Json<Member>), ApiError> {
    owned_project(&state, project_id, user)?;
    let target = state
        .store
        .read(|s| s.user_by_name(body.username.trim()).cloned())
        .ok_or_else(|| ApiError::not_found("user"))?;
    state.store.commit(
        Some(user),
        Change::MemberAdded {
            project_id,
            user_id: target.id,
        },
    )?;
    Ok((
        StatusCode::CREATED,
        Json(Member {
            user_id: target.id,
            username: Some(target.username),
            role: Role::Member,
        }),
    ))
}

pub async fn get_settings(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
) -> Result<Json<AuditConfig>, ApiError> {
    member_project(&state, project_id, user).map(|p| Json(p.settings))
}

/// Merges a partial settings object. Scores already recorded keep the
/// settings they were computed with.
pub async fn update_settings(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
    Json(patch): Json<Value>,
) -> Result<Json<AuditConfig>, ApiError> {
    let project = owned_project(&state, project_id, user)?;
    let settings = project.settings.merge(&patch).map_err(ApiError::fields)?;
    state.store.commit(
        Some(user),
        Change::SettingsUpdated {
            project_id,
            settings: settings.clone(),
        },
    )?;
    Ok(Json(settings))
}
