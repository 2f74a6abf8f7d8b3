use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

/// Error body shared by every endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct ErrorBody {
    /// Machine-readable kind: `not_found`, `validation`, `unavailable`, `internal`.
    pub error: String,
    pub message: String,
    /// Offending values for validation errors.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offenders: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{message}")]
    Validation { message: String, offenders: Vec<String> },
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn validation(message: impl Into<String>, offenders: Vec<String>) -> Self {
        ApiError::Validation {
            message: message.into(),
            offenders,
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Validation { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn body(&self) -> ErrorBody {
        let (kind, offenders) = match self {
            ApiError::NotFound(_) => ("not_found", Vec::new()),
            ApiError::Validation { offenders, .. } => ("validation", offenders.clone()),
            ApiError::Unavailable(_) => ("unavailable", Vec::new()),
            ApiError::Internal(_) => ("internal", Vec::new()),
        };
        ErrorBody {
            error: kind.into(),
            message: self.to_string(),
            offenders,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}
