//! Provider abstraction: chat and fine-tuning calls against a language-model
//! backend, plus error classification, rate limiting and retry.

pub mod ratelimit;
pub mod retry;
pub mod http;
pub mod sim;

use crate::clock::{SharedSleeper, Sleeper};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("server error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("request rejected with status {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("response violated the expected schema: {0}")]
    SchemaViolation(String),
    #[error("fine-tune job {job_id} failed: {message}")]
    JobFailed { job_id: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Connection,
    Timeout,
    Server,
    Rejected,
    SchemaViolation,
    JobFailed,
}

impl ProviderError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ProviderError::Connection(_) => ErrorKind::Connection,
            ProviderError::Timeout(_) => ErrorKind::Timeout,
            ProviderError::Server { .. } => ErrorKind::Server,
            ProviderError::Rejected { .. } => ErrorKind::Rejected,
            ProviderError::SchemaViolation(_) => ErrorKind::SchemaViolation,
            ProviderError::JobFailed { .. } => ErrorKind::JobFailed,
        }
    }

    pub fn from_status(status: u16, message: String) -> Self {
        if status >= 500 {
            ProviderError::Server { status, message }
        } else {
            ProviderError::Rejected { status, message }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Transient,
    Permanent,
}

/// Which error kinds are worth retrying. Shipped as data so deployments can
/// widen or narrow the transient set without a rebuild.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationTable {
    pub transient: BTreeSet<ErrorKind>,
}

impl Default for ClassificationTable {
    fn default() -> Self {
        ClassificationTable {
            transient: [ErrorKind::Connection, ErrorKind::Timeout, ErrorKind::Server]
                .into_iter()
                .collect(),
        }
    }
}

impl ClassificationTable {
    pub fn classify(&self, error: &ProviderError) -> ErrorClass {
        if self.transient.contains(&error.kind()) {
            ErrorClass::Transient
        } else {
            ErrorClass::Permanent
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Plan,
    Revise,
    Research,
    Answer,
    Judge,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChatRequest {
    pub purpose: Purpose,
    pub model: String,
    pub system: Option<String>,
    pub user: String,
    pub seed: u64,
    pub max_output_tokens: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub tokens_in: u64,
    pub tokens_out: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.tokens_in + self.tokens_out
    }

    pub fn add(&mut self, other: &Usage) {
        self.tokens_in += other.tokens_in;
        self.tokens_out += other.tokens_out;
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Sft,
    Dpo,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FineTuneRequest {
    pub kind: JobKind,
    pub base_model: String,
    pub dataset_jsonl: String,
    pub epochs: u32,
    /// Preference-loss temperature, required for DPO jobs.
    pub beta: Option<f64>,
    /// Suffix folded into the resulting model id.
    pub suffix: String,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
    pub model_id: Option<String>,
    pub error: Option<String>,
    pub usage: Usage,
}

pub trait Provider: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
    /// Returns a job id to poll.
    fn submit_fine_tune(&self, request: &FineTuneRequest) -> Result<String, ProviderError>;
    fn poll_job(&self, job_id: &str) -> Result<JobStatus, ProviderError>;
}

pub type SharedProvider = Arc<dyn Provider>;

/// Polls a submitted job until it leaves the queue, sleeping between polls.
pub fn wait_for_job(
    provider: &dyn Provider,
    job_id: &str,
    sleeper: &dyn Sleeper,
    poll_interval: Duration,
    max_polls: u32,
) -> Result<JobStatus, ProviderError> {
    for poll in 0..max_polls {
        let status = provider.poll_job(job_id)?;
        match status.state {
            JobState::Succeeded => return Ok(status),
            JobState::Failed => {
                return Err(ProviderError::JobFailed {
                    job_id: job_id.to_string(),
                    message: status.error.unwrap_or_else(|| "unknown failure".into()),
                })
            }
            JobState::Queued | JobState::Running => {
                if poll + 1 < max_polls {
                    sleeper.sleep(poll_interval);
                }
            }
        }
    }
    Err(ProviderError::Timeout(poll_interval * max_polls))
}

/// Wraps a provider to count calls and track peak concurrent chat requests.
pub struct CountingProvider {
    inner: SharedProvider,
    pub chat_calls: AtomicU64,
    pub fine_tune_calls: AtomicU64,
    pub poll_calls: AtomicU64,
    in_flight: AtomicI64,
    pub max_in_flight: AtomicI64,
}

impl CountingProvider {
    pub fn new(inner: SharedProvider) -> Self {
        CountingProvider {
            inner,
            chat_calls: AtomicU64::new(0),
            fine_tune_calls: AtomicU64::new(0),
            poll_calls: AtomicU64::new(0),
            in_flight: AtomicI64::new(0),
            max_in_flight: AtomicI64::new(0),
        }
    }

    pub fn total_calls(&self) -> u64 {
        self.chat_calls.load(Ordering::SeqCst)
            + self.fine_tune_calls.load(Ordering::SeqCst)
            + self.poll_calls.load(Ordering::SeqCst)
    }
}

impl Provider for CountingProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let result = self.inner.chat(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }

    fn submit_fine_tune(&self, request: &FineTuneRequest) -> Result<String, ProviderError> {
        self.fine_tune_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.submit_fine_tune(request)
    }

    fn poll_job(&self, job_id: &str) -> Result<JobStatus, ProviderError> {
        self.poll_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.poll_job(job_id)
    }
}

/// Bundles the transport with the policies every call site needs.
pub struct ProviderHandle {
    pub provider: SharedProvider,
    pub limiter: std::sync::Mutex<ratelimit::TokenBucket>,
    pub retry: retry::RetryPolicy,
    pub classification: ClassificationTable,
    pub sleeper: SharedSleeper,
}

impl ProviderHandle {
    pub fn new(provider: SharedProvider, sleeper: SharedSleeper) -> Self {
        ProviderHandle {
            provider,
            limiter: std::sync::Mutex::new(ratelimit::TokenBucket::default()),
            retry: retry::RetryPolicy::default(),
            classification: ClassificationTable::default(),
            sleeper,
        }
    }

    fn acquire_slot(&self) {
        let wait = {
            let mut bucket = self.limiter.lock().expect("limiter poisoned");
            bucket.acquire(std::time::Instant::now())
        };
        if !wait.is_zero() {
            self.sleeper.sleep(wait);
        }
    }
}

impl Provider for ProviderHandle {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        retry::with_retry(
            &self.retry,
            &self.classification,
            self.sleeper.as_ref(),
            request.seed,
            || {
                self.acquire_slot();
                self.provider.chat(request)
            },
        )
    }

    fn submit_fine_tune(&self, request: &FineTuneRequest) -> Result<String, ProviderError> {
        retry::with_retry(
            &self.retry,
            &self.classification,
            self.sleeper.as_ref(),
            request.seed,
            || self.provider.submit_fine_tune(request),
        )
    }

    fn poll_job(&self, job_id: &str) -> Result<JobStatus, ProviderError> {
        retry::with_retry(
            &self.retry,
            &self.classification,
            self.sleeper.as_ref(),
            0,
            || self.provider.poll_job(job_id),
        )
    }
}
