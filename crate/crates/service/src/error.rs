use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use thiserror::Error;

/// Request-level failures, each mapping to one HTTP status.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),

    /// Invalid input; `component` names the stage that rejected it.
    #[error("{component}: {message}")]
    Unprocessable { component: String, message: String },

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn invalid(component: &str, message: impl std::fmt::Display) -> Self {
        ServiceError::Unprocessable {
            component: component.to_string(),
            message: message.to_string(),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Unprocessable { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let component = match &self {
            ServiceError::Unprocessable { component, .. } => Some(component.clone()),
            _ => None,
        };
        let body = serde_json::json!({
            "error": self.to_string(),
            "component": component,
        });
        (self.status(), Json(body)).into_response()
    }
}
