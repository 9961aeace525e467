//! In-memory job registry for the long-running endpoints.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use swat_client::{ApiError, JobState, JobStatus};

#[derive(Debug)]
struct JobEntry {
    state: JobState,
    result: Option<serde_json::Value>,
    error: Option<ApiError>,
}

#[derive(Debug, Default)]
struct Inner {
    next_id: u64,
    entries: HashMap<u64, JobEntry>,
}

/// Shared registry of submitted jobs. Results live for the lifetime of the
/// process; this service runs desk-scale experiment batches, not a durable
/// queue.
#[derive(Clone, Debug, Default)]
pub struct JobTable {
    inner: Arc<Mutex<Inner>>,
}

impl JobTable {
    /// Register a queued job and hand back its id.
    pub fn create(&self) -> u64 {
        let mut inner = self.inner.lock().expect("job table lock");
        let id = inner.next_id;
        inner.next_id += 1;
        inner
            .entries
            .insert(id, JobEntry { state: JobState::Queued, result: None, error: None });
        id
    }

    pub fn mark_running(&self, id: u64) {
        let mut inner = self.inner.lock().expect("job table lock");
        if let Some(entry) = inner.entries.get_mut(&id) {
            entry.state = JobState::Running;
        }
    }

    pub fn finish(&self, id: u64, outcome: Result<serde_json::Value, ApiError>) {
        let mut inner = self.inner.lock().expect("job table lock");
        if let Some(entry) = inner.entries.get_mut(&id) {
            match outcome {
                Ok(value) => {
                    entry.state = JobState::Done;
                    entry.result = Some(value);
                }
                Err(e) => {
                    entry.state = JobState::Failed;
                    entry.error = Some(e);
                }
            }
        }
    }

    pub fn status(&self, id: u64) -> Option<JobStatus> {
        let inner = self.inner.lock().expect("job table lock");
        inner.entries.get(&id).map(|entry| JobStatus {
            id,
            state: entry.state,
            result: entry.result.clone(),
            error: entry.error.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifecycle_reaches_done_with_payload() {
        let table = JobTable::default();
        let id = table.create();
        assert_eq!(table.status(id).unwrap().state, JobState::Queued);

        table.mark_running(id);
        assert_eq!(table.status(id).unwrap().state, JobState::Running);

        table.finish(id, Ok(serde_json::json!({"overall": 47.1})));
        let status = table.status(id).unwrap();
        assert_eq!(status.state, JobState::Done);
        assert_eq!(status.result.unwrap()["overall"], 47.1);
        assert!(status.error.is_none());
    }

    #[test]
    fn failures_keep_the_stage_tag() {
        let table = JobTable::default();
        let id = table.create();
        table.finish(
            id,
            Err(ApiError { stage: "stage1".into(), message: "non-finite loss".into() }),
        );
        let status = table.status(id).unwrap();
        assert_eq!(status.state, JobState::Failed);
        assert_eq!(status.error.unwrap().stage, "stage1");
        assert!(status.result.is_none());
    }

    #[test]
    fn ids_are_unique_and_unknown_ids_are_absent() {
        let table = JobTable::default();
        let a = table.create();
        let b = table.create();
        assert_ne!(a, b);
        assert!(table.status(u64::MAX).is_none());
    }
}
