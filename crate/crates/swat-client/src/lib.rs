//! Typed HTTP client for the experiment service.
//!
//! The service and its clients are expected to share a filesystem: requests
//! carry configs and output paths, responses carry summaries, and the bulky
//! artifacts (checkpoints, reports, plots) land on disk where the request
//! pointed. Quick operations respond inline; training runs return a job id
//! to poll.

mod client;
mod dto;

pub use client::{ApiClient, ClientError};
pub use dto::{
    ApiError, EvalRequest, ExperimentRequest, HealthResponse, JobCreated, JobState, JobStatus,
    ProbeGapRequest, RetrieveRequest, SweepRequest, SynthGenRequest,
};

pub type Result<T> = std::result::Result<T, ClientError>;
