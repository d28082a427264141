//! Client for a completion endpoint.
//!
//! Request body: `{prompt, stop, max_tokens, temperature}`. Response body:
//! `{text, finish_reason}`, or the same pair nested as `choices[0]` the way
//! OpenAI-style completion servers return it. Completion servers drop the
//! stop sequence from the returned text; it is restored here so that the
//! rollout engine always sees closed blocks.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{apply_stops, GenerationRequest, Policy, PolicyError, PolicySample};

pub const ENDPOINT_ENV: &str = "REFINE_LOOP_ENDPOINT";
pub const TIMEOUT_ENV: &str = "REFINE_LOOP_TIMEOUT_S";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub stop: Vec<String>,
    pub max_tokens: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub finish_reason: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WireResponse {
    Flat(CompletionResponse),
    Choices { choices: Vec<CompletionResponse> },
}

impl WireResponse {
    fn into_completion(self) -> Option<CompletionResponse> {
        match self {
            WireResponse::Flat(r) => Some(r),
            WireResponse::Choices { choices } => choices.into_iter().next(),
        }
    }
}

/// Validates a raw response body.
pub fn parse_response(body: &str) -> Result<CompletionResponse, PolicyError> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| PolicyError::RemoteMalformedResponse(e.to_string()))?;
    wire.into_completion()
        .ok_or_else(|| PolicyError::RemoteMalformedResponse("empty choices".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub attempts: u32,
    pub backoff: Duration,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(60),
            max_in_flight: 8,
            attempts: 3,
            backoff: Duration::from_millis(200),
        }
    }

    /// Reads the endpoint and optional timeout from the environment.
    pub fn from_env() -> Result<Self, PolicyError> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| PolicyError::RemoteUnavailable(format!("{ENDPOINT_ENV} is not set")))?;
        let mut cfg = RemoteConfig::new(endpoint);
        if let Ok(t) = std::env::var(TIMEOUT_ENV) {
            let secs: f64 = t
                .parse()
                .map_err(|_| PolicyError::InvalidRequest(format!("{TIMEOUT_ENV}={t} is not a number")))?;
            cfg.timeout = Duration::from_secs_f64(secs);
        }
        Ok(cfg)
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemotePolicy {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    slots: Semaphore,
}

enum Attempt {
    Retry(String),
    Fatal(PolicyError),
}

impl RemotePolicy {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let slots = Semaphore {
            free: Mutex::new(cfg.max_in_flight.max(1)),
            cv: Condvar::new(),
        };
        RemotePolicy { cfg, agent, slots }
    }

    fn post_once(&self, body: &CompletionRequest) -> Result<CompletionResponse, Attempt> {
        let mut resp = self
            .agent
            .post(&self.cfg.endpoint)
            .send_json(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        match status {
            200..=299 => parse_response(&text).map_err(Attempt::Fatal),
            500..=599 | 429 => Err(Attempt::Retry(format!("HTTP {status}"))),
            _ => Err(Attempt::Fatal(PolicyError::RemoteUnavailable(format!("HTTP {status}")))),
        }
    }

    pub fn complete(&self, body: &CompletionRequest) -> Result<CompletionResponse, PolicyError> {
        let _permit = self.slots.acquire();
        let mut last = String::new();
        for attempt in 0..self.cfg.attempts.max(1) {
            if attempt > 0 {
                thread::sleep(self.cfg.backoff * 2u32.pow(attempt - 1));
            }
            match self.post_once(body) {
                Ok(r) => return Ok(r),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    warn!(attempt, %msg, "completion request failed");
                    last = msg;
                }
            }
        }
        Err(PolicyError::RemoteUnavailable(last))
    }
}

/// Re-attaches the stop sequence a server stripped: the one whose opening tag
/// is the most recent unclosed tag in `text`.
pub fn restore_stop(text: &str, stops: &[String]) -> Option<String> {
    stops
        .iter()
        .filter_map(|s| {
            let open = s.strip_prefix("</").map(|name| format!("<{name}"))?;
            let at = text.rfind(&open)?;
            let closed = text.rfind(s.as_str()).is_some_and(|c| c > at);
            (!closed).then_some((at, s))
        })
        .max_by_key(|(at, _)| *at)
        .map(|(_, s)| s.clone())
}

impl Policy for RemotePolicy {
    fn generate(&self, req: &GenerationRequest, _rng: &mut dyn RngCore) -> Result<PolicySample, PolicyError> {
        req.validate()?;
        let body = CompletionRequest {
            prompt: req.prompt.clone(),
            stop: req.stop_sequences.clone(),
            max_tokens: req.max_new_tokens,
            temperature: req.temperature,
        };
        let resp = self.complete(&body)?;
        let mut text = resp.text;
        if resp.finish_reason == "stop" {
            if let Some(stop) = restore_stop(&text, &req.stop_sequences) {
                text.push_str(&stop);
            }
        }
        let (kept, stop_hit) = apply_stops(&text, &req.stop_sequences, req.max_new_tokens);
        Ok(PolicySample {
            tokens: Vec::new(),
            text: kept.to_string(),
            logprobs: None,
            stop_hit,
            token_contexts: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_shapes() {
        let r = parse_response(r#"{"text":"a","finish_reason":"stop"}"#).unwrap();
        assert_eq!(r.text, "a");
        let r = parse_response(r#"{"id":"x","choices":[{"text":"b","finish_reason":"length","index":0}]}"#).unwrap();
        assert_eq!(r.finish_reason, "length");
        for bad in [
            r#"{"text":1,"finish_reason":"stop"}"#,
            r#"{"choices":[]}"#,
            "not json",
            r#"{"text":"a"}"#,
        ] {
            assert!(
                matches!(parse_response(bad), Err(PolicyError::RemoteMalformedResponse(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn stripped_stop_is_restored() {
        let stops = vec!["</search>".to_string(), "</answer>".to_string()];
        assert_eq!(
            restore_stop("<think>x</think><search>q", &stops).as_deref(),
            Some("</search>")
        );
        assert_eq!(
            restore_stop("<search>a</search><answer>b", &stops).as_deref(),
            Some("</answer>")
        );
        assert_eq!(restore_stop("<think>x</think>", &stops), None);
    }
}
