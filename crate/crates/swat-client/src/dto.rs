//! Wire types shared by the service and its clients.
//!
//! Request bodies embed the full [`ExperimentConfig`] rather than a path so
//! that a client can tweak a loaded config (seeds, retrieval size) without
//! writing temporary files. Result payloads reuse the report types from
//! `swat-core`, which already define the on-disk JSON schema.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use swat_core::config::ExperimentConfig;
use swat_core::synth::SyntheticTaskSpec;

/// `GET /healthz` response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub version: String,
}

/// Error body returned with every non-2xx status: which pipeline stage
/// failed, and the human-readable reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub stage: String,
    pub message: String,
}

/// `POST /v1/retrieve`: run corpus retrieval standalone and write the
/// candidate/pool artifacts under `out_dir`. Responds with
/// `swat_core::experiment::RetrievalRun`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub config: ExperimentConfig,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// `POST /v1/synth-gen`: materialize a synthetic task (vocabulary, splits,
/// caption corpus) as files under `out_dir`. Responds with
/// `swat_core::experiment::SynthGenFiles`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGenRequest {
    pub spec: SyntheticTaskSpec,
    /// Extra concept-free captions mixed into the generated corpus.
    #[serde(default)]
    pub distractors: usize,
    pub out_dir: PathBuf,
}

/// `POST /v1/probe-gap`: train the source-distinguishability probe.
/// Responds with `swat_core::experiment::ProbeGapReport`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGapRequest {
    pub config: ExperimentConfig,
    #[serde(default)]
    pub seed: u64,
}

/// `POST /v1/eval`: score a saved checkpoint on the configured test set.
/// Responds with `swat_core::eval::EvalReport`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub config: ExperimentConfig,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

/// `POST /v1/experiments`: full multi-seed pipeline for one method
/// (`zeroshot_head`, `linear_probe`, `fsft`, `swat`, `swat_plus`,
/// `stage1_only`). Responds with [`JobCreated`]; the finished job carries a
/// `swat_core::experiment::AggregateReport`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRequest {
    pub config: ExperimentConfig,
    pub method: String,
    pub out_dir: PathBuf,
}

/// `POST /v1/sweep`: one experiment per axis value (`retrieval_k`,
/// `fewshot_ratio`, `stage1_epochs`, `msda_method`). Responds with
/// [`JobCreated`]; the finished job carries a
/// `swat_core::experiment::SweepReport`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    pub config: ExperimentConfig,
    pub method: String,
    pub axis: String,
    pub values: Vec<String>,
    pub out_dir: PathBuf,
}

/// Accepted-for-processing response of the job endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobCreated {
    pub job_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    /// Whether the job will not change state again.
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

/// `GET /v1/jobs/{id}` response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub state: JobState,
    /// Result payload once `state` is `done`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    /// Failure details once `state` is `failed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_state_uses_snake_case_on_the_wire() {
        assert_eq!(serde_json::to_string(&JobState::Queued).unwrap(), "\"queued\"");
        assert_eq!(serde_json::to_string(&JobState::Failed).unwrap(), "\"failed\"");
        let back: JobState = serde_json::from_str("\"running\"").unwrap();
        assert_eq!(back, JobState::Running);
        assert!(!back.is_terminal());
        assert!(JobState::Done.is_terminal());
        assert!(JobState::Failed.is_terminal());
    }

    #[test]
    fn job_status_omits_empty_fields() {
        let pending = JobStatus { id: 7, state: JobState::Running, result: None, error: None };
        let text = serde_json::to_string(&pending).unwrap();
        assert!(!text.contains("result"));
        assert!(!text.contains("error"));
        let back: JobStatus = serde_json::from_str(&text).unwrap();
        assert_eq!(back, pending);
    }

    #[test]
    fn requests_round_trip_with_default_seed() {
        let cfg = ExperimentConfig::from_toml("[task.synthetic]\n").unwrap();
        let req = ProbeGapRequest { config: cfg.clone(), seed: 0 };
        let text = serde_json::to_string(&req).unwrap();
        let back: ProbeGapRequest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, req);

        // `seed` may be omitted entirely.
        let bare = format!("{{\"config\":{}}}", serde_json::to_string(&cfg).unwrap());
        let back: ProbeGapRequest = serde_json::from_str(&bare).unwrap();
        assert_eq!(back.seed, 0);
    }
}
