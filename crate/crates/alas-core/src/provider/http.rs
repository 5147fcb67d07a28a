//! Generic HTTP adapter speaking a minimal chat/fine-tune/poll contract.
//!
//! Endpoints under the configured base URL:
//!
//! ```text
//! POST {base}/chat              ChatRequest → ChatResponse
//! POST {base}/fine-tunes        FineTuneRequest → {"job_id": ...}
//! GET  {base}/fine-tunes/{id}   → JobStatus
//! ```
//!
//! The API key is read from the environment variable named at construction
//! and sent as a bearer token. Request and response payloads go to an
//! optional sink with the credential scrubbed, so runs can be replayed from
//! the log without leaking secrets.

use crate::provider::{
    ChatRequest, ChatResponse, FineTuneRequest, JobStatus, Provider, ProviderError,
};
use serde::Deserialize;
use std::sync::Arc;
use std::time::Duration;

pub type PayloadSink = Arc<dyn Fn(&str) + Send + Sync>;

pub struct HttpProvider {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
    timeout: Duration,
    sink: Option<PayloadSink>,
}

#[derive(Deserialize)]
struct SubmitReply {
    job_id: String,
}

impl HttpProvider {
    pub fn new(base_url: &str, api_key_env: &str, timeout: Duration) -> HttpProvider {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .new_agent();
        HttpProvider {
            agent,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: std::env::var(api_key_env).ok().filter(|k| !k.is_empty()),
            timeout,
            sink: None,
        }
    }

    pub fn with_payload_sink(mut self, sink: PayloadSink) -> HttpProvider {
        self.sink = Some(sink);
        self
    }

    fn redact(&self, line: &str) -> String {
        match &self.api_key {
            Some(key) => line.replace(key, "[REDACTED]"),
            None => line.to_string(),
        }
    }

    fn log(&self, direction: &str, endpoint: &str, payload: &str) {
        if let Some(sink) = &self.sink {
            let line = serde_json::json!({
                "direction": direction,
                "endpoint": endpoint,
                "payload": payload,
            })
            .to_string();
            sink(&self.redact(&line));
        }
    }

    fn transport_error(&self, e: ureq::Error) -> ProviderError {
        match e {
            ureq::Error::Timeout(_) => ProviderError::Timeout(self.timeout),
            ureq::Error::Io(io) => ProviderError::Connection(io.to_string()),
            ureq::Error::HostNotFound => ProviderError::Connection("host not found".to_string()),
            other => ProviderError::Connection(other.to_string()),
        }
    }

    fn post_json<T: for<'de> Deserialize<'de>>(
        &self,
        endpoint: &str,
        body: &impl serde::Serialize,
    ) -> Result<T, ProviderError> {
        let rendered = serde_json::to_string(body)
            .map_err(|e| ProviderError::SchemaViolation(e.to_string()))?;
        self.log("request", endpoint, &rendered);
        let url = format!("{}{endpoint}", self.base_url);
        let mut builder = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            builder = builder.header("authorization", format!("Bearer {key}"));
        }
        let mut response = builder.send_json(body).map_err(|e| self.transport_error(e))?;
        self.read_reply(endpoint, &mut response)
    }

    fn get_json<T: for<'de> Deserialize<'de>>(&self, endpoint: &str) -> Result<T, ProviderError> {
        self.log("request", endpoint, "");
        let url = format!("{}{endpoint}", self.base_url);
        let mut builder = self.agent.get(&url);
        if let Some(key) = &self.api_key {
            builder = builder.header("authorization", format!("Bearer {key}"));
        }
        let mut response = builder.call().map_err(|e| self.transport_error(e))?;
        self.read_reply(endpoint, &mut response)
    }

    fn read_reply<T: for<'de> Deserialize<'de>>(
        &self,
        endpoint: &str,
        response: &mut ureq::http::Response<ureq::Body>,
    ) -> Result<T, ProviderError> {
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| self.transport_error(e))?;
        self.log("response", endpoint, &text);
        if !(200..300).contains(&status) {
            return Err(ProviderError::from_status(status, text));
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::SchemaViolation(e.to_string()))
    }
}

impl Provider for HttpProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.post_json("/chat", request)
    }

    fn submit_fine_tune(&self, request: &FineTuneRequest) -> Result<String, ProviderError> {
        let reply: SubmitReply = self.post_json("/fine-tunes", request)?;
        Ok(reply.job_id)
    }

    fn poll_job(&self, job_id: &str) -> Result<JobStatus, ProviderError> {
        self.get_json(&format!("/fine-tunes/{job_id}"))
    }
}
