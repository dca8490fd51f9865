use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),

    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    WrongKind(String),

    #[error("{0}")]
    BadRequest(String),

    #[error("{0}")]
    Storage(String),

    #[error(transparent)]
    Core(#[from] vinebud::Error),
}

/// Body of every error response.
#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not-found",
            ServiceError::Validation(_) => "validation",
            ServiceError::WrongKind(_) => "wrong-kind",
            ServiceError::BadRequest(_) => "bad-request",
            ServiceError::Storage(_) => "storage",
            ServiceError::Core(vinebud::Error::InvalidArgument(_) | vinebud::Error::Manifest { .. }) => "validation",
            ServiceError::Core(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self.code() {
            "not-found" => StatusCode::NOT_FOUND,
            "validation" | "wrong-kind" => StatusCode::UNPROCESSABLE_ENTITY,
            "bad-request" => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub(crate) fn storage(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        ServiceError::Storage(format!("{}: {e}", path.display()))
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        let body = ErrorBody {
            code: self.code(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;
