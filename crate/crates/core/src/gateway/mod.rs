//! Uniform completion interface over interchangeable backends.
//!
//! * [`HttpBackend`] talks to a chat-completion endpoint with retries and a
//!   fair in-flight limit.
//! * [`ReplayBackend`] answers from a recorded transcript keyed by a hash of
//!   the prompt; [`Recorder`] writes such transcripts.
//! * [`OracleBackend`] reads the pipeline's own prompts and answers them by
//!   replaying the simulator's answer policy.

mod http;
mod oracle;
mod replay;
pub mod tokens;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use http::{FairLimiter, HttpBackend, HttpSpec, Permit, RetryPolicy};
pub use oracle::{infer_profile, infer_summary, oracle_decode, Observation, OracleBackend, OraclePrediction};
pub use replay::{request_key, Recorder, ReplayBackend, TranscriptEntry, WILDCARD_KEY};
pub use tokens::{count_tokens, truncate_to_budget, ApproxTokenizer, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_text: String,
    pub user_text: String,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
    /// Sampling seed; distinguishes repeated samples of the same prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_new_tokens == 0 {
            return Err(GatewayError::ZeroBudget);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub token_count: usize,
    pub latency_ms: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("max_new_tokens must be at least 1")]
    ZeroBudget,
    #[error("request failed after {attempts} attempt(s): {message}")]
    Exhausted { attempts: u32, message: String },
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    Malformed(String),
    #[error("transcript miss for request hash {0}")]
    TranscriptMiss(String),
    #[error("transcript {path}: {message}")]
    Transcript { path: PathBuf, message: String },
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("backend {backend} does not support this request: {what}")]
    Unsupported { backend: String, what: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Replay,
    Oracle,
}

pub trait Backend: Send + Sync {
    /// Stable identifier recorded in run manifests.
    fn id(&self) -> String;
    fn kind(&self) -> BackendKind;
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        (**self).complete(req)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Http(HttpSpec),
    Replay { transcript: PathBuf },
    #[default]
    Oracle,
}

impl BackendSpec {
    pub fn kind(&self) -> BackendKind {
        match self {
            BackendSpec::Http(_) => BackendKind::Http,
            BackendSpec::Replay { .. } => BackendKind::Replay,
            BackendSpec::Oracle => BackendKind::Oracle,
        }
    }

    /// Parses the short command-line form: `oracle`, `replay:<path>`,
    /// `http:<base-url>[#model]`.
    pub fn parse_short(s: &str) -> Option<BackendSpec> {
        if s == "oracle" {
            return Some(BackendSpec::Oracle);
        }
        if let Some(path) = s.strip_prefix("replay:") {
            return Some(BackendSpec::Replay {
                transcript: PathBuf::from(path),
            });
        }
        let url = s.strip_prefix("http:").filter(|u| !u.is_empty())?;
        let (endpoint, model) = url.split_once('#').unwrap_or((url, ""));
        Some(BackendSpec::Http(HttpSpec {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            ..HttpSpec::default()
        }))
    }
}

pub fn connect(spec: &BackendSpec) -> Result<Arc<dyn Backend>, GatewayError> {
    Ok(match spec {
        BackendSpec::Http(h) => Arc::new(HttpBackend::new(h.clone())?),
        BackendSpec::Replay { transcript } => Arc::new(ReplayBackend::load(transcript)?),
        BackendSpec::Oracle => Arc::new(OracleBackend),
    })
}

/// One-shot convenience: connect to `spec` and run a single request.
pub fn complete(spec: &BackendSpec, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
    connect(spec)?.complete(req)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_specs() {
        assert_eq!(BackendSpec::parse_short("oracle"), Some(BackendSpec::Oracle));
        assert_eq!(
            BackendSpec::parse_short("replay:t.jsonl"),
            Some(BackendSpec::Replay {
                transcript: "t.jsonl".into()
            })
        );
        match BackendSpec::parse_short("http:http://localhost:8000#gpt") {
            Some(BackendSpec::Http(h)) => {
                assert_eq!(h.endpoint, "http://localhost:8000");
                assert_eq!(h.model, "gpt");
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(BackendSpec::parse_short("http:"), None);
        assert_eq!(BackendSpec::parse_short("carrier-pigeon"), None);
    }

    #[test]
    fn spec_toml_shape() {
        let spec: BackendSpec = toml::from_str("kind = \"replay\"\ntranscript = \"a.jsonl\"").unwrap();
        assert_eq!(spec.kind(), BackendKind::Replay);
        let spec: BackendSpec = toml::from_str("kind = \"http\"\nendpoint = \"http://x\"").unwrap();
        assert_eq!(spec.kind(), BackendKind::Http);
    }

    #[test]
    fn zero_budget_is_rejected() {
        let req = CompletionRequest {
            system_text: String::new(),
            user_text: String::new(),
            max_new_tokens: 0,
            temperature: 0.0,
            stop: vec![],
            seed: None,
        };
        assert!(matches!(complete(&BackendSpec::Oracle, &req), Err(GatewayError::ZeroBudget)));
    }
}
