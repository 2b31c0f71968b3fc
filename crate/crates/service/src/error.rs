use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use serde_json::json;

/// The closed set of machine-readable error codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    InvalidRequest,
    AlreadyStarted,
    SessionNotStarted,
    SessionFinished,
    NotAwaitingHuman,
    IterationCapReached,
    CapacityExceeded,
    ShuttingDown,
    #[serde(rename = "internal_error")]
    Internal,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 10] = [
        ErrorCode::NotFound,
        ErrorCode::InvalidRequest,
        ErrorCode::AlreadyStarted,
        ErrorCode::SessionNotStarted,
        ErrorCode::SessionFinished,
        ErrorCode::NotAwaitingHuman,
        ErrorCode::IterationCapReached,
        ErrorCode::CapacityExceeded,
        ErrorCode::ShuttingDown,
        ErrorCode::Internal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::NotFound => "not_found",
            ErrorCode::InvalidRequest => "invalid_request",
            ErrorCode::AlreadyStarted => "already_started",
            ErrorCode::SessionNotStarted => "session_not_started",
            ErrorCode::SessionFinished => "session_finished",
            ErrorCode::NotAwaitingHuman => "not_awaiting_human",
            ErrorCode::IterationCapReached => "iteration_cap_reached",
            ErrorCode::CapacityExceeded => "capacity_exceeded",
            ErrorCode::ShuttingDown => "shutting_down",
            ErrorCode::Internal => "internal_error",
        }
    }

    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::InvalidRequest => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::AlreadyStarted
            | ErrorCode::SessionNotStarted
            | ErrorCode::SessionFinished
            | ErrorCode::NotAwaitingHuman
            | ErrorCode::IterationCapReached => StatusCode::CONFLICT,
            ErrorCode::CapacityExceeded | ErrorCode::ShuttingDown => StatusCode::SERVICE_UNAVAILABLE,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn not_found(id: &str) -> Self {
        Self::new(ErrorCode::NotFound, format!("no session {id}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code.as_str(), "message": self.message } });
        (self.code.status(), Json(body)).into_response()
    }
}
