//! The async HTTP client.

use std::fmt;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use swat_core::eval::EvalReport;
use swat_core::experiment::{AggregateReport, ProbeGapReport, RetrievalRun, SynthGenFiles};

use crate::dto::{
    ApiError, EvalRequest, ExperimentRequest, HealthResponse, JobCreated, JobStatus,
    ProbeGapRequest, RetrieveRequest, SweepRequest, SynthGenRequest,
};
use crate::Result;

/// Everything that can go wrong between a request and a decoded response.
#[derive(Debug)]
pub enum ClientError {
    /// The request never produced an HTTP response (connection refused,
    /// timeout, protocol error).
    Transport(reqwest::Error),
    /// The service answered with an error status and a structured body.
    Api { status: u16, stage: String, message: String },
    /// A success response failed to decode as the expected type.
    Decode { context: &'static str, message: String },
}

impl fmt::Display for ClientError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClientError::Transport(e) => write!(f, "transport error: {}", e),
            ClientError::Api { status, stage, message } => {
                write!(f, "server error {} [{}]: {}", status, stage, message)
            }
            ClientError::Decode { context, message } => {
                write!(f, "could not decode {}: {}", context, message)
            }
        }
    }
}

impl std::error::Error for ClientError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ClientError::Transport(e) => Some(e),
            _ => None,
        }
    }
}

impl From<reqwest::Error> for ClientError {
    fn from(e: reqwest::Error) -> Self {
        ClientError::Transport(e)
    }
}

/// Async client for one service instance.
#[derive(Debug, Clone)]
pub struct ApiClient {
    http: reqwest::Client,
    base: String,
}

impl ApiClient {
    /// `base_url` like `http://127.0.0.1:8080` (trailing slashes are fine).
    pub fn new(base_url: impl Into<String>) -> Self {
        let mut base = base_url.into();
        while base.ends_with('/') {
            base.pop();
        }
        ApiClient { http: reqwest::Client::new(), base }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    /// Decode a success body, or surface the service's error body.
    async fn decode<T: DeserializeOwned>(
        response: reqwest::Response,
        context: &'static str,
    ) -> Result<T> {
        let status = response.status();
        if status.is_success() {
            let body = response.bytes().await?;
            return serde_json::from_slice(&body)
                .map_err(|e| ClientError::Decode { context, message: e.to_string() });
        }
        let body = response.bytes().await.unwrap_or_default();
        let api: ApiError = serde_json::from_slice(&body).unwrap_or_else(|_| ApiError {
            stage: "transport".into(),
            message: String::from_utf8_lossy(&body).into_owned(),
        });
        Err(ClientError::Api { status: status.as_u16(), stage: api.stage, message: api.message })
    }

    async fn post<B: Serialize, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
        context: &'static str,
    ) -> Result<T> {
        let response = self.http.post(self.url(path)).json(body).send().await?;
        Self::decode(response, context).await
    }

    pub async fn healthz(&self) -> Result<HealthResponse> {
        let response = self.http.get(self.url("/healthz")).send().await?;
        Self::decode(response, "health response").await
    }

    pub async fn retrieve(&self, req: &RetrieveRequest) -> Result<RetrievalRun> {
        self.post("/v1/retrieve", req, "retrieval summary").await
    }

    pub async fn synth_gen(&self, req: &SynthGenRequest) -> Result<SynthGenFiles> {
        self.post("/v1/synth-gen", req, "generated-task manifest").await
    }

    pub async fn probe_gap(&self, req: &ProbeGapRequest) -> Result<ProbeGapReport> {
        self.post("/v1/probe-gap", req, "probe report").await
    }

    pub async fn eval(&self, req: &EvalRequest) -> Result<EvalReport> {
        self.post("/v1/eval", req, "evaluation report").await
    }

    pub async fn submit_experiment(&self, req: &ExperimentRequest) -> Result<JobCreated> {
        self.post("/v1/experiments", req, "job ticket").await
    }

    pub async fn submit_sweep(&self, req: &SweepRequest) -> Result<JobCreated> {
        self.post("/v1/sweep", req, "job ticket").await
    }

    pub async fn job(&self, id: u64) -> Result<JobStatus> {
        let response = self.http.get(self.url(&format!("/v1/jobs/{}", id))).send().await?;
        Self::decode(response, "job status").await
    }

    /// Poll `GET /v1/jobs/{id}` until the job reaches a terminal state.
    pub async fn wait_for_job(&self, id: u64, poll: Duration) -> Result<JobStatus> {
        loop {
            let status = self.job(id).await?;
            if status.state.is_terminal() {
                return Ok(status);
            }
            tokio::time::sleep(poll).await;
        }
    }

    /// Decode a finished job's result payload (e.g. an aggregate report).
    pub fn job_result<T: DeserializeOwned>(status: &JobStatus) -> Result<T> {
        let value = status.result.clone().ok_or(ClientError::Decode {
            context: "job result",
            message: "job has no result payload".into(),
        })?;
        serde_json::from_value(value)
            .map_err(|e| ClientError::Decode { context: "job result", message: e.to_string() })
    }

    /// Convenience: submit an experiment and wait for its aggregate report.
    pub async fn run_experiment(
        &self,
        req: &ExperimentRequest,
        poll: Duration,
    ) -> Result<AggregateReport> {
        let ticket = self.submit_experiment(req).await?;
        let status = self.wait_for_job(ticket.job_id, poll).await?;
        match status.error {
            Some(e) => {
                Err(ClientError::Api { status: 500, stage: e.stage, message: e.message })
            }
            None => Self::job_result(&status),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_url_is_normalized() {
        assert_eq!(ApiClient::new("http://localhost:8080///").base_url(), "http://localhost:8080");
        assert_eq!(ApiClient::new("http://localhost:8080").base_url(), "http://localhost:8080");
    }

    #[test]
    fn errors_render_their_context() {
        let api = ClientError::Api { status: 422, stage: "config".into(), message: "bad k".into() };
        assert_eq!(api.to_string(), "server error 422 [config]: bad k");
        let decode = ClientError::Decode { context: "job status", message: "eof".into() };
        assert_eq!(decode.to_string(), "could not decode job status: eof");
    }

    #[test]
    fn job_result_decodes_the_payload() {
        let status = JobStatus {
            id: 1,
            state: crate::JobState::Done,
            result: Some(serde_json::json!({"a": 3})),
            error: None,
        };
        let value: serde_json::Value = ApiClient::job_result(&status).unwrap();
        assert_eq!(value["a"], 3);
        let no_payload = JobStatus { result: None, ..status };
        let err = ApiClient::job_result::<serde_json::Value>(&no_payload).unwrap_err();
        assert!(matches!(err, ClientError::Decode { .. }));
    }
}
