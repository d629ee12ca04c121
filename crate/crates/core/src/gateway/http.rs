use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{count_tokens, Backend, BackendKind, CompletionRequest, CompletionResponse, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            initial_backoff_ms: 250,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): doubling, capped.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64 << (retry.saturating_sub(1)).min(20);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

/// Chat-completion endpoint. The bearer credential is read from the
/// environment variable named by `api_key_env`, never from the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpSpec {
    pub endpoint: String,
    pub path: String,
    pub model: String,
    pub api_key_env: Option<String>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for HttpSpec {
    fn default() -> Self {
        HttpSpec {
            endpoint: String::new(),
            path: "/v1/chat/completions".into(),
            model: String::new(),
            api_key_env: None,
            max_in_flight: 4,
            timeout_secs: 120,
            retry: RetryPolicy::default(),
        }
    }
}

impl HttpSpec {
    pub fn url(&self) -> String {
        format!("{}{}", self.endpoint.trim_end_matches('/'), self.path)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(GatewayError::InvalidSpec(format!(
                "http backend needs an http(s) endpoint, got {:?}",
                self.endpoint
            )));
        }
        if self.max_in_flight == 0 || self.retry.max_attempts == 0 {
            return Err(GatewayError::InvalidSpec(
                "max_in_flight and retry.max_attempts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// FIFO admission with a cap on concurrent holders.
pub struct FairLimiter {
    max: usize,
    state: Mutex<LimiterState>,
    turn: Condvar,
}

#[derive(Default)]
struct LimiterState {
    next_ticket: u64,
    now_serving: u64,
    in_flight: usize,
}

pub struct Permit<'a>(&'a FairLimiter);

impl FairLimiter {
    pub fn new(max: usize) -> Self {
        FairLimiter {
            max: max.max(1),
            state: Mutex::new(LimiterState::default()),
            turn: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut s = self.state.lock().expect("limiter lock");
        let ticket = s.next_ticket;
        s.next_ticket += 1;
        while s.now_serving != ticket || s.in_flight >= self.max {
            s = self.turn.wait(s).expect("limiter lock");
        }
        s.now_serving += 1;
        s.in_flight += 1;
        self.turn.notify_all();
        Permit(self)
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().expect("limiter lock").in_flight
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut s = self.0.state.lock().expect("limiter lock");
        s.in_flight -= 1;
        self.0.turn.notify_all();
    }
}

pub struct HttpBackend {
    spec: HttpSpec,
    credential: Option<String>,
    agent: ureq::Agent,
    limiter: FairLimiter,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fail(GatewayError),
}

impl HttpBackend {
    pub fn new(spec: HttpSpec) -> Result<Self, GatewayError> {
        spec.validate()?;
        let credential = match &spec.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::MissingCredential(var.clone()))?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(spec.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend {
            limiter: FairLimiter::new(spec.max_in_flight),
            spec,
            credential,
            agent,
        })
    }

    fn body(&self, req: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": self.spec.model,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": req.user_text},
            ],
            "max_tokens": req.max_new_tokens,
            "temperature": req.temperature,
        });
        if !req.stop.is_empty() {
            body["stop"] = json!(req.stop);
        }
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, payload: &str) -> Attempt {
        let mut call = self
            .agent
            .post(&self.spec.url())
            .header("Content-Type", "application/json");
        if let Some(key) = &self.credential {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match call.send(payload) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let body = match resp.body_mut().read_to_string() {
            Ok(b) => b,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        match status {
            200..=299 => match extract_text(&body) {
                Some(text) => Attempt::Done(text),
                None => Attempt::Fail(GatewayError::Malformed(body)),
            },
            429 | 500..=599 => Attempt::Retry(format!("status {status}: {body}")),
            _ => Attempt::Fail(GatewayError::Status { status, body }),
        }
    }
}

fn extract_text(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    let choice = v.get("choices")?.get(0)?;
    choice
        .pointer("/message/content")
        .or_else(|| choice.get("text"))?
        .as_str()
        .map(str::to_string)
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}#{}", self.spec.endpoint, self.spec.model)
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        req.validate()?;
        let payload = self.body(req).to_string();
        let _permit = self.limiter.acquire();
        let start = Instant::now();
        let mut last = String::new();
        for attempt in 1..=self.spec.retry.max_attempts {
            if attempt > 1 {
                std::thread::sleep(self.spec.retry.backoff(attempt - 1));
            }
            match self.attempt(&payload) {
                Attempt::Done(text) => {
                    return Ok(CompletionResponse {
                        token_count: count_tokens(&text),
                        text,
                        latency_ms: start.elapsed().as_secs_f64() * 1e3,
                    })
                }
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(GatewayError::Exhausted {
            attempts: self.spec.retry.max_attempts,
            message: last,
        })
    }
}
