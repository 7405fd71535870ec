use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::Json;
use chrono::Utc;
use codeaudit_core::api::{Credentials, Session, UserProfile};
use uuid::Uuid;

use super::AuthUser;
use crate::auth::{hash_password, verify_password};
use crate::error::ApiError;
use crate::state::AppState;
use crate::store::{Change, UserRecord};

const MIN_PASSWORD_CHARS: usize = 8;

fn profile(u: &UserRecord) -> UserProfile {
    UserProfile {
        id: u.id,
        username: u.username.clone(),
        created_at: u.created_at,
    }
}

pub async fn register(
    State(state): State<AppState>,
    Json(body): Json<Credentials>,
) -> Result<(StatusCode, Json<UserProfile>), ApiError> {
    let username = body.username.trim();
    if username.is_empty() || username.chars().count() > 64 {
        return Err(ApiError::validation("username must be 1 to 64 characters"));
    }
    if body.password.chars().count() < MIN_PASSWORD_CHARS {
        return Err(ApiError::validation(format!(
            "password must be at least {MIN_PASSWORD_CHARS} characters"
        )));
    }
    if state.store.read(|s| s.user_by_name(username).is_some()) {
        return Err(ApiError::conflict(format!(
            "username `{username}` is taken"
        )));
    }
    let password = body.password.clone();
    let password_hash = tokio::task::spawn_blocking(move || hash_password(&password))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let user = UserRecord {
        id: Uuid::new_v4(),
        username: username.to_string(),
        password_hash,
        created_at: Utc::now(),
    };
    state
        .store
        .commit(Some(user.id), Change::UserRegistered(user.clone()))?;
    Ok((StatusCode::CREATED, Json(profile(&user))))
}

pub async fn login(
    State(state): State<AppState>,
    Json(body): Json<Credentials>,
) -> Result<Json<Session>, ApiError> {
    let user = state
        .store
        .read(|s| s.user_by_name(body.username.trim()).cloned());
    let bad = || ApiError::unauthorized("unknown user or wrong password");
    let user = user.ok_or_else(bad)?;
    let hash = user.password_hash.clone();
    let ok = tokio::task::spawn_blocking(move || verify_password(&body.password, &hash))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    if !ok {
        return Err(bad());
    }
    let (token, expires_at) = state.sessions.issue(user.id);
    Ok(Json(Session {
        token,
        expires_at,
        user: profile(&user),
    }))
}

pub async fn logout(
    State(state): State<AppState>,
    _user: AuthUser,
    headers: HeaderMap,
) -> StatusCode {
    if let Some(token) = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
    {
        state.sessions.revoke(token.trim());
    }
    StatusCode::NO_CONTENT
}

pub async fn me(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
) -> Result<Json<UserProfile>, ApiError> {
    state
        .store
        .read(|s| s.users.get(&user).map(profile))
        .map(Json)
        .ok_or_else(|| ApiError::not_found("user"))
}
