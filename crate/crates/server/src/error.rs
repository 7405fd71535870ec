use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use codeaudit_core::api::{ErrorBody, ErrorDetail, FieldProblem};
use codeaudit_core::pipeline::FieldError;
use codeaudit_core::vector_store::StoreError as VectorError;

use crate::auth::TokenError;
use crate::store::{StateError, StoreError};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub fields: Vec<FieldProblem>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    pub fn unauthorized(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", message)
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", message)
    }

    pub fn not_found(what: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("{what} not found"),
        )
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn fields(errors: Vec<FieldError>) -> Self {
        let mut e = Self::validation(
            errors
                .iter()
                .map(|f| format!("{}: {}", f.field, f.message))
                .collect::<Vec<_>>()
                .join("; "),
        );
        e.fields = errors
            .into_iter()
            .map(|f| FieldProblem {
                field: f.field.to_string(),
                message: f.message,
            })
            .collect();
        e
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code.to_string(),
                message: self.message,
                fields: self.fields,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<TokenError> for ApiError {
    fn from(e: TokenError) -> Self {
        match e {
            TokenError::Invalid => Self::unauthorized("missing or invalid token"),
            TokenError::Expired => Self::new(
                StatusCode::UNAUTHORIZED,
                "token_expired",
                "token has expired",
            ),
        }
    }
}

impl From<StateError> for ApiError {
    fn from(e: StateError) -> Self {
        match e {
            StateError::NotFound(what) => Self::not_found(what),
            StateError::Conflict(msg) => Self::conflict(msg),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::State(s) => s.into(),
            other => Self::internal(other.to_string()),
        }
    }
}

impl From<VectorError> for ApiError {
    fn from(e: VectorError) -> Self {
        match e {
            VectorError::ImmutableHistory(id) => Self::new(
                StatusCode::CONFLICT,
                "immutable_history",
                format!("consistency score {id} is part of an append-only history"),
            ),
            VectorError::CodeNotFound(_) => Self::not_found("code"),
            VectorError::CollectionNotFound(_) => Self::not_found("vector collection"),
            other => Self::internal(other.to_string()),
        }
    }
}
