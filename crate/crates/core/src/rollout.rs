//! The multi-turn search-and-refine loop.
//!
//! The engine alternates policy generation with retrieval: every policy
//! segment ending in `</search>` triggers a query whose rendered results are
//! injected as a documents block, and generation resumes after it. A rollout
//! ends on `</answer>`, when the policy-token budget runs out, when the
//! policy keeps searching past the search budget, or on malformed output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{GenerationRequest, Policy, PolicyError, TokenContext};
use crate::retrieval::{render_documents_block, Document, RetrievalConfig, RetrievalError, RetrievalIndex};
use crate::rewards::QaExample;
use crate::tokenize::whitespace_token_count;
use crate::trajectory::{parse_steps, ActionTag, Origin, ParseMode, TerminationReason, Trajectory, TrajectoryLog};

/// Injected in place of retrieval results once the search budget is spent.
pub const SEARCH_BUDGET_SENTINEL: &str = "Search budget exhausted; provide your final answer.";

const INSTRUCTIONS: [&str; 7] = [
    "You are a helpful assistant who is good at answering questions with multi-turn search engine calling.",
    "To answer questions, you must first reason through the available information using <think> and </think>.",
    "If you identify missing knowledge, you may issue a search request using <search> query </search> at any time.",
    "The retrieval system will provide you with the three most relevant documents enclosed in <documents> and </documents>.",
    "After each search, you need to summarize and refine the existing documents in <refine> and </refine>.",
    "You may send multiple search requests if needed.",
    "Once you have sufficient information, provide a concise final answer using <answer> and </answer>.",
];
const REFINE_INSTRUCTION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateMode {
    #[default]
    Refine,
    NoRefine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub max_search_actions: usize,
    pub max_response_tokens: usize,
    pub group_size: usize,
    pub temperature: f64,
    pub template_mode: TemplateMode,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            max_search_actions: 5,
            max_response_tokens: 2048,
            group_size: 5,
            temperature: 1.0,
            template_mode: TemplateMode::Refine,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.max_search_actions == 0 || self.max_response_tokens == 0 || self.group_size == 0 {
            return Err(RolloutError::InvalidConfig(
                "max_search_actions, max_response_tokens and group_size must be positive".into(),
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(RolloutError::InvalidConfig(
                "temperature must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("empty question")]
    EmptyQuestion,
    #[error("invalid rollout config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// A scored unit of the token stream. Policy tokens from the toy backend carry
/// their symbol, context and log-probability; other tokens are whitespace
/// tokens of the segment text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamToken {
    pub symbol: Option<u32>,
    pub context: Option<TokenContext>,
    pub logprob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub origin: Origin,
    pub text: String,
    pub tokens: Vec<StreamToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub question_id: String,
    pub trajectory: Trajectory,
    /// One entry per search step; `None` marks a search past the budget.
    pub retrieved: Vec<Option<Vec<Document>>>,
    pub segments: Vec<Segment>,
    pub seed: u64,
}

impl RolloutRecord {
    /// Concatenated response text (policy and engine segments).
    pub fn response_text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn policy_token_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.origin == Origin::Policy)
            .map(|s| whitespace_token_count(&s.text))
            .sum()
    }

    pub fn executed_searches(&self) -> usize {
        self.retrieved.iter().filter(|r| r.is_some()).count()
    }

    pub fn to_log(&self, q: &QaExample) -> TrajectoryLog {
        TrajectoryLog {
            id: q.id.clone(),
            question: q.question.clone(),
            gold_answers: q.gold_answers.clone(),
            steps: self.trajectory.steps.clone(),
            termination_reason: self.trajectory.termination_reason,
            retrieved: Some(self.retrieved.clone()),
            seed: Some(self.seed),
        }
    }
}

pub fn build_prompt(question: &str, mode: TemplateMode) -> Result<String, RolloutError> {
    if question.trim().is_empty() {
        return Err(RolloutError::EmptyQuestion);
    }
    let sentences: Vec<&str> = INSTRUCTIONS
        .iter()
        .enumerate()
        .filter(|(i, _)| mode == TemplateMode::Refine || *i != REFINE_INSTRUCTION)
        .map(|(_, s)| *s)
        .collect();
    Ok(format!(
        "{}\n<user> Question: {question} </user>\n",
        sentences.join(" ")
    ))
}

fn stop_sequences() -> Vec<String> {
    vec![
        ActionTag::Search.close().to_string(),
        ActionTag::Answer.close().to_string(),
    ]
}

fn documents_segment(content: &str) -> Segment {
    let text = format!(
        "{}{content}{}",
        ActionTag::Documents.open(),
        ActionTag::Documents.close()
    );
    let tokens = vec![
        StreamToken {
            symbol: None,
            context: None,
            logprob: None,
        };
        whitespace_token_count(&text)
    ];
    Segment {
        origin: Origin::Engine,
        text,
        tokens,
    }
}

pub fn run_rollout<P: Policy + ?Sized>(
    policy: &P,
    index: &RetrievalIndex,
    q: &QaExample,
    cfg: &RolloutConfig,
    rcfg: &RetrievalConfig,
    seed: u64,
) -> Result<RolloutRecord, RolloutError> {
    cfg.validate()?;
    index.check_config(rcfg)?;
    let prompt = build_prompt(&q.question, cfg.template_mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut context = prompt.clone();
    let mut segments: Vec<Segment> = Vec::new();
    let mut retrieved: Vec<Option<Vec<Document>>> = Vec::new();
    let mut used = 0usize;

    let reason = loop {
        let remaining = cfg.max_response_tokens - used;
        if remaining == 0 {
            break TerminationReason::LengthBudget;
        }
        let req = GenerationRequest {
            prompt: context.clone(),
            response_start: prompt.len(),
            question: q.question.clone(),
            stop_sequences: stop_sequences(),
            max_new_tokens: remaining,
            temperature: cfg.temperature,
            allow_refine: cfg.template_mode == TemplateMode::Refine,
        };
        let sample = policy.generate(&req, &mut rng)?;
        let produced = whitespace_token_count(&sample.text);
        if produced > remaining {
            // Backends must honour max_new_tokens; treat an overrun as a cutoff.
            break TerminationReason::LengthBudget;
        }
        used += produced;
        context.push_str(&sample.text);
        segments.push(policy_segment(&sample));

        match sample.stop_hit.as_deref() {
            Some("</answer>") => {
                let parsed = parse_steps(&context[prompt.len()..], ParseMode::Strict);
                break if parsed.error.is_none() {
                    TerminationReason::Answered
                } else {
                    TerminationReason::Malformed
                };
            }
            Some("</search>") => {
                let parsed = parse_steps(&context[prompt.len()..], ParseMode::Strict);
                let query = match (&parsed.error, parsed.steps.last()) {
                    (None, Some(step)) if step.tag == ActionTag::Search => step.content.clone(),
                    _ => break TerminationReason::Malformed,
                };
                let block = if retrieved.len() < cfg.max_search_actions {
                    let docs = match index.query(&query, rcfg) {
                        Ok(docs) => docs,
                        Err(RetrievalError::EmptyQuery) => Vec::new(),
                        Err(e) => return Err(e.into()),
                    };
                    let block = render_documents_block(&docs, rcfg);
                    retrieved.push(Some(docs));
                    block
                } else if retrieved.len() == cfg.max_search_actions {
                    retrieved.push(None);
                    SEARCH_BUDGET_SENTINEL.to_string()
                } else {
                    // Searching again after the sentinel ends the rollout.
                    break TerminationReason::SearchBudgetThenNoAnswer;
                };
                let seg = documents_segment(&block);
                context.push_str(&seg.text);
                segments.push(seg);
            }
            _ => {
                break if used >= cfg.max_response_tokens {
                    TerminationReason::LengthBudget
                } else {
                    TerminationReason::Malformed
                };
            }
        }
    };

    let response = &context[prompt.len()..];
    let mut steps = parse_steps(response, ParseMode::Strict).steps;
    if reason == TerminationReason::SearchBudgetThenNoAnswer {
        // The final search never received a documents block; drop it so the
        // search/documents pairing holds.
        if steps.last().is_some_and(|s| s.tag == ActionTag::Search) {
            steps.pop();
        }
    }
    if reason != TerminationReason::Answered && steps.last().is_some_and(|s| s.tag == ActionTag::Answer) {
        steps.pop();
    }
    let trajectory = Trajectory {
        question: q.question.clone(),
        steps,
        terminated: true,
        termination_reason: Some(reason),
    };
    Ok(RolloutRecord {
        question_id: q.id.clone(),
        trajectory,
        retrieved,
        segments,
        seed,
    })
}

fn policy_segment(sample: &crate::policy::PolicySample) -> Segment {
    let tokens = match (&sample.token_contexts, &sample.logprobs) {
        (Some(ctxs), Some(lps)) if ctxs.len() == sample.tokens.len() => sample
            .tokens
            .iter()
            .zip(ctxs)
            .zip(lps)
            .map(|((&s, &c), &lp)| StreamToken {
                symbol: Some(s),
                context: Some(c),
                logprob: Some(lp),
            })
            .collect(),
        _ => vec![
            StreamToken {
                symbol: None,
                context: None,
                logprob: None,
            };
            whitespace_token_count(&sample.text)
        ],
    };
    Segment {
        origin: Origin::Policy,
        text: sample.text.clone(),
        tokens,
    }
}

/// `group_size` rollouts with seeds `seed..seed + group_size`, run in parallel.
/// Pass the frozen sampling policy, not the one being updated.
pub fn run_group<P: Policy + ?Sized>(
    policy: &P,
    index: &RetrievalIndex,
    q: &QaExample,
    cfg: &RolloutConfig,
    rcfg: &RetrievalConfig,
    seed: u64,
) -> Result<Vec<RolloutRecord>, RolloutError> {
    (0..cfg.group_size as u64)
        .into_par_iter()
        .map(|i| run_rollout(policy, index, q, cfg, rcfg, seed.wrapping_add(i)))
        .collect()
}

/// Checks a record against the engine contract: documents blocks equal the
/// rendering of the recorded results (or the budget sentinel), engine segments
/// are exactly the documents blocks, and the policy stayed within budget.
pub fn check_record(rec: &RolloutRecord, cfg: &RolloutConfig, rcfg: &RetrievalConfig) -> Result<(), String> {
    crate::trajectory::check_invariants(&rec.trajectory)?;
    let docs_steps: Vec<&str> = rec.trajectory.contents(ActionTag::Documents).collect();
    if docs_steps.len() != rec.retrieved.len() {
        return Err(format!(
            "{} documents blocks for {} searches",
            docs_steps.len(),
            rec.retrieved.len()
        ));
    }
    for (i, (content, r)) in docs_steps.iter().zip(&rec.retrieved).enumerate() {
        let expected = match r {
            Some(docs) => render_documents_block(docs, rcfg),
            None => SEARCH_BUDGET_SENTINEL.to_string(),
        };
        if *content != expected {
            return Err(format!("documents block {i} does not match its retrieval record"));
        }
    }
    let engine: Vec<&Segment> = rec.segments.iter().filter(|s| s.origin == Origin::Engine).collect();
    if engine.len() != docs_steps.len()
        || engine
            .iter()
            .zip(&docs_steps)
            .any(|(seg, c)| seg.text != format!("{}{c}{}", ActionTag::Documents.open(), ActionTag::Documents.close()))
    {
        return Err("engine segments do not cover exactly the documents blocks".into());
    }
    if rec.policy_token_count() > cfg.max_response_tokens {
        return Err("policy tokens exceed the response budget".into());
    }
    if rec.executed_searches() > cfg.max_search_actions {
        return Err("executed searches exceed the search budget".into());
    }
    Ok(())
}
