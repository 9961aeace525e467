//! Mapping pipeline errors onto HTTP responses.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use swat_client::ApiError;
use swat_core::SwatError;

/// An error response: status code plus the stage-tagged JSON body.
#[derive(Debug)]
pub struct ServiceError {
    pub status: StatusCode,
    pub body: ApiError,
}

impl ServiceError {
    pub fn new(status: StatusCode, stage: impl Into<String>, message: impl Into<String>) -> Self {
        ServiceError {
            status,
            body: ApiError { stage: stage.into(), message: message.into() },
        }
    }

    pub fn not_found(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, stage, message)
    }
}

/// The pipeline stage a core error belongs to; used as the `stage` tag of
/// error responses and job failures.
pub fn stage_of(e: &SwatError) -> String {
    match e {
        SwatError::Io { .. } | SwatError::Parse { .. } => "io".into(),
        SwatError::Config { .. } | SwatError::InvalidParameter { .. } => "config".into(),
        SwatError::Vocabulary { .. } | SwatError::DuplicateRecordId { .. } => "vocab".into(),
        SwatError::DimensionMismatch { .. }
        | SwatError::InputKind { .. }
        | SwatError::WrongStage { .. }
        | SwatError::Checkpoint { .. } => "model".into(),
        SwatError::NotEnoughExamples { .. }
        | SwatError::PoolMismatch { .. }
        | SwatError::EmptyData { .. } => "data".into(),
        SwatError::NonFiniteLoss { stage, .. } => stage.clone(),
        SwatError::Probe { .. } => "probe".into(),
    }
}

impl From<SwatError> for ServiceError {
    fn from(e: SwatError) -> Self {
        // Divergent training is the one failure the request cannot have
        // caused by construction; everything else is a rejected input.
        let status = match &e {
            SwatError::NonFiniteLoss { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ServiceError { status, body: ApiError { stage: stage_of(&e), message: e.to_string() } }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_map_to_422_with_config_stage() {
        let e = ServiceError::from(SwatError::config("retrieval.k: must be >= 1"));
        assert_eq!(e.status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(e.body.stage, "config");
        assert!(e.body.message.contains("retrieval.k"));
    }

    #[test]
    fn diverged_training_is_a_server_error_named_after_its_stage() {
        let e = ServiceError::from(SwatError::NonFiniteLoss {
            stage: "stage1".into(),
            epoch: 3,
            batch: 7,
        });
        assert_eq!(e.status, StatusCode::INTERNAL_SERVER_ERROR);
        assert_eq!(e.body.stage, "stage1");
    }

    #[test]
    fn every_variant_has_a_stage() {
        let io = SwatError::io("/nope", std::io::Error::other("gone"));
        assert_eq!(stage_of(&io), "io");
        assert_eq!(stage_of(&SwatError::EmptyData { context: "test set".into() }), "data");
        assert_eq!(stage_of(&SwatError::Probe { message: "x".into() }), "probe");
        assert_eq!(
            stage_of(&SwatError::WrongStage { expected: "stage1".into(), found: "pretrained".into() }),
            "model"
        );
    }
}
