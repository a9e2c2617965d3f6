use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use crate::SCHEMA_VERSION;

/// Failures while assembling the service.
#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] lineadapt::error::Error),
    #[error(transparent)]
    Harness(#[from] lineadapt_harness::HarnessError),
    #[error("{0}")]
    Config(String),
}

/// An error answered to a client.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    /// Characters outside the model's charset, when that is the problem.
    pub offending: Option<Vec<String>>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    schema_version: u32,
    error: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    offending: Option<&'a [String]>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into(), offending: None }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<lineadapt::error::Error> for ApiError {
    fn from(e: lineadapt::error::Error) -> Self {
        ApiError::internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { schema_version: SCHEMA_VERSION, error: &self.message, offending: self.offending.as_deref() };
        (self.status, Json(body)).into_response()
    }
}
