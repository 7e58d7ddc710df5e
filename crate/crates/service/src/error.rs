use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use cemx_core::Error as CoreError;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ApiError::Core(e) => match e {
                CoreError::Busy | CoreError::NothingToUndo => StatusCode::CONFLICT,
                CoreError::SingularKernel => StatusCode::UNPROCESSABLE_ENTITY,
                CoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
                _ => StatusCode::BAD_REQUEST,
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            ApiError::BadRequest(_) => "BadRequest",
            ApiError::NotFound(_) => "NotFound",
            ApiError::Internal(_) => "Internal",
            ApiError::Core(e) => match e {
                CoreError::InvalidDims(_) => "InvalidDims",
                CoreError::Io(_) => "Io",
                CoreError::SingularKernel => "SingularKernel",
                CoreError::KernelFormat(_) => "KernelFormatError",
                CoreError::OracleTooLarge { .. } => "OracleTooLarge",
                CoreError::GraphShape(_) => "GraphShape",
                CoreError::EmptyRegion(_) => "EmptyRegion",
                CoreError::InvalidParam(_) => "InvalidParam",
                CoreError::Calibration(_) => "CalibrationError",
                CoreError::Estimation(_) => "EstimationError",
                CoreError::Busy => "Busy",
                CoreError::NothingToUndo => "NothingToUndo",
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string(), "kind": self.kind() }))).into_response()
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;
