//! Actors that produce trajectory text.
//!
//! [`ScriptedPolicy`] replays fixed segments, [`ToySoftmaxPolicy`] is a
//! trainable order-2 categorical model with exact log-probabilities,
//! [`ToySearchAgent`] drives that model through the tag grammar, and
//! [`RemotePolicy`] talks to a completion endpoint.

mod agent;
mod remote;
mod toy;

use std::collections::HashMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenize::truncate_to_tokens;

pub use agent::{allowed_after, document_bodies, AgentSymbol, FactTracker, ToySearchAgent};
pub use remote::{CompletionRequest, CompletionResponse, RemoteConfig, RemotePolicy};
pub use toy::{FrozenPolicy, ToySoftmaxPolicy};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("remote backend unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("malformed remote response: {0}")]
    RemoteMalformedResponse(String),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// Full context: the rendered prompt followed by the response so far.
    pub prompt: String,
    /// Byte offset in `prompt` where the response begins.
    pub response_start: usize,
    /// The question being answered.
    pub question: String,
    pub stop_sequences: Vec<String>,
    pub max_new_tokens: usize,
    pub temperature: f64,
    /// Whether refine blocks are part of the grammar for this rollout.
    pub allow_refine: bool,
}

impl GenerationRequest {
    pub fn response(&self) -> &str {
        &self.prompt[self.response_start..]
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.max_new_tokens == 0 {
            return Err(PolicyError::InvalidRequest("max_new_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(PolicyError::InvalidRequest(
                "temperature must be finite and >= 0".into(),
            ));
        }
        if self.response_start > self.prompt.len() || !self.prompt.is_char_boundary(self.response_start) {
            return Err(PolicyError::InvalidRequest("response_start out of range".into()));
        }
        Ok(())
    }
}

/// Scoring context of one sampled toy token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenContext {
    pub context: u32,
    /// Bit `i` set iff symbol `i` was allowed at this position.
    pub allowed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicySample {
    pub tokens: Vec<u32>,
    pub text: String,
    pub logprobs: Option<Vec<f64>>,
    pub stop_hit: Option<String>,
    pub token_contexts: Option<Vec<TokenContext>>,
}

pub trait Policy: Sync {
    fn generate(&self, req: &GenerationRequest, rng: &mut dyn RngCore) -> Result<PolicySample, PolicyError>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn generate(&self, req: &GenerationRequest, rng: &mut dyn RngCore) -> Result<PolicySample, PolicyError> {
        (**self).generate(req, rng)
    }
}

/// Cuts `text` at the end of the earliest stop sequence, then at the token
/// budget. Returns the kept text and the stop sequence if one survived.
pub fn apply_stops<'a>(text: &'a str, stops: &[String], max_tokens: usize) -> (&'a str, Option<String>) {
    let earliest = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()).map(|i| (i + s.len(), s)))
        .min_by_key(|(end, _)| *end);
    let (cut, stop) = match earliest {
        Some((end, s)) => (&text[..end], Some(s.clone())),
        None => (text, None),
    };
    let bounded = truncate_to_tokens(cut, max_tokens);
    if bounded.len() == cut.len() {
        (cut, stop)
    } else {
        (bounded, None)
    }
}

/// Replays fixed text segments. The n-th call within an episode emits the
/// n-th segment, where n is the number of documents blocks already in the
/// response. Exhausted scripts emit nothing.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    default: Vec<String>,
    per_question: HashMap<String, Vec<String>>,
}

impl ScriptedPolicy {
    pub fn new(segments: impl IntoIterator<Item = impl Into<String>>) -> Self {
        ScriptedPolicy {
            default: segments.into_iter().map(Into::into).collect(),
            per_question: HashMap::new(),
        }
    }

    pub fn with_question(mut self, question: impl Into<String>, segments: Vec<String>) -> Self {
        self.per_question.insert(question.into(), segments);
        self
    }
}

impl Policy for ScriptedPolicy {
    fn generate(&self, req: &GenerationRequest, _rng: &mut dyn RngCore) -> Result<PolicySample, PolicyError> {
        req.validate()?;
        let script = self.per_question.get(&req.question).unwrap_or(&self.default);
        let turn = req.response().matches("<documents>").count();
        let segment = script.get(turn).map(String::as_str).unwrap_or("");
        let (text, stop_hit) = apply_stops(segment, &req.stop_sequences, req.max_new_tokens);
        Ok(PolicySample {
            tokens: Vec::new(),
            text: text.to_string(),
            logprobs: None,
            stop_hit,
            token_contexts: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn request(prompt: &str, stops: &[&str], max: usize) -> GenerationRequest {
        GenerationRequest {
            prompt: prompt.to_string(),
            response_start: prompt.len(),
            question: "Q".into(),
            stop_sequences: stops.iter().map(|s| s.to_string()).collect(),
            max_new_tokens: max,
            temperature: 1.0,
            allow_refine: true,
        }
    }

    #[test]
    fn scripted_fixture() {
        let p = ScriptedPolicy::new(["<think>a</think><search>b</search>"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = p
            .generate(&request("P", &["</search>", "</answer>"], 100), &mut rng)
            .unwrap();
        assert_eq!(s.text, "<think>a</think><search>b</search>");
        assert_eq!(s.stop_hit.as_deref(), Some("</search>"));
    }

    #[test]
    fn scripted_turns_follow_documents_blocks() {
        let p = ScriptedPolicy::new(["<search>a</search>", "<answer>x</answer>"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut req = request("P", &["</search>", "</answer>"], 100);
        req.prompt.push_str("<search>a</search><documents>d</documents>");
        let s = p.generate(&req, &mut rng).unwrap();
        assert_eq!(s.text, "<answer>x</answer>");
        req.prompt.push_str("<answer>x</answer><documents>d</documents>");
        assert_eq!(p.generate(&req, &mut rng).unwrap().text, "");
    }

    #[test]
    fn stops_cut_at_first_occurrence() {
        let stops = vec!["</search>".to_string(), "</answer>".to_string()];
        let (t, s) = apply_stops("<search>a</search><answer>b</answer>", &stops, 100);
        assert_eq!(t, "<search>a</search>");
        assert_eq!(s.as_deref(), Some("</search>"));
        let (t, s) = apply_stops("a b c d </answer>", &stops, 2);
        assert_eq!((t, s), ("a b", None));
        let (t, s) = apply_stops("plain", &stops, 5);
        assert_eq!((t, s), ("plain", None));
    }

    #[test]
    fn zero_budget_is_rejected() {
        let p = ScriptedPolicy::new(["x"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            p.generate(&request("P", &["</answer>"], 0), &mut rng),
            Err(PolicyError::InvalidRequest(_))
        ));
    }
}
