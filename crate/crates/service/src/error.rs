use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use scalae_core::Error;
use serde::Serialize;

/// Error envelope returned by every endpoint: `{code, message, field?}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    pub fn bad_request(field: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message: message.into(),
            field: field.map(str::to_owned),
        }
    }

    pub fn unprocessable(field: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "unprocessable",
            message: message.into(),
            field: field.map(str::to_owned),
        }
    }

    pub fn unavailable() -> Self {
        Self {
            status: StatusCode::SERVICE_UNAVAILABLE,
            code: "model_not_loaded",
            message: "no checkpoint is loaded".into(),
            field: None,
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: message.into(),
            field: None,
        }
    }

    /// Maps a core failure: broken preconditions are the caller's fault (422),
    /// anything else is ours.
    pub fn from_core(err: Error, field: Option<&str>) -> Self {
        match err {
            Error::Contract(m) => Self::unprocessable(field, m),
            Error::Validation(m) | Error::Format(m) => Self::bad_request(field, m),
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}
