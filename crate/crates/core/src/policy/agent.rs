//! Grammar-constrained search agent on top of [`ToySoftmaxPolicy`].
//!
//! The agent's alphabet holds the grammar's tags plus a handful of content
//! actions whose surface text is filled in from what the agent can read: the
//! question, the latest documents block, and the facts it has written into
//! its own refine blocks. The context of every decision is the pair
//! (progress observation, previous symbol); the observation summarizes how
//! many hops of the question the agent's refinements have resolved.

use std::sync::OnceLock;

use rand::RngCore;
use regex::Regex;

use super::{GenerationRequest, Policy, PolicyError, PolicySample, TokenContext, ToySoftmaxPolicy};
use crate::synthkb::{parse_facts, ChainQuestion};
use crate::tokenize::whitespace_token_count;
use crate::trajectory::{parse_steps, ActionTag, ParseMode, Step};

/// Agent alphabet, in id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum AgentSymbol {
    Bos,
    ObsNone,
    ObsPartial,
    ObsComplete,
    ThinkOpen,
    ThinkPlan,
    ThinkClose,
    SearchOpen,
    QueryHop,
    QueryQuestion,
    QueryHead,
    SearchClose,
    DocumentsOpen,
    DocumentsClose,
    RefineOpen,
    RefineTop,
    RefineLast,
    RefineClose,
    AnswerOpen,
    AnswerRefined,
    AnswerDoc,
    AnswerHead,
    AnswerClose,
}

impl AgentSymbol {
    pub const ALL: [AgentSymbol; 23] = [
        AgentSymbol::Bos,
        AgentSymbol::ObsNone,
        AgentSymbol::ObsPartial,
        AgentSymbol::ObsComplete,
        AgentSymbol::ThinkOpen,
        AgentSymbol::ThinkPlan,
        AgentSymbol::ThinkClose,
        AgentSymbol::SearchOpen,
        AgentSymbol::QueryHop,
        AgentSymbol::QueryQuestion,
        AgentSymbol::QueryHead,
        AgentSymbol::SearchClose,
        AgentSymbol::DocumentsOpen,
        AgentSymbol::DocumentsClose,
        AgentSymbol::RefineOpen,
        AgentSymbol::RefineTop,
        AgentSymbol::RefineLast,
        AgentSymbol::RefineClose,
        AgentSymbol::AnswerOpen,
        AgentSymbol::AnswerRefined,
        AgentSymbol::AnswerDoc,
        AgentSymbol::AnswerHead,
        AgentSymbol::AnswerClose,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        use AgentSymbol::*;
        match self {
            Bos => "<bos>",
            ObsNone => "obs:none",
            ObsPartial => "obs:partial",
            ObsComplete => "obs:complete",
            ThinkOpen => "<think>",
            ThinkPlan => "think:plan",
            ThinkClose => "</think>",
            SearchOpen => "<search>",
            QueryHop => "query:next-hop",
            QueryQuestion => "query:question",
            QueryHead => "query:head",
            SearchClose => "</search>",
            DocumentsOpen => "<documents>",
            DocumentsClose => "</documents>",
            RefineOpen => "<refine>",
            RefineTop => "refine:top-doc",
            RefineLast => "refine:last-doc",
            RefineClose => "</refine>",
            AnswerOpen => "<answer>",
            AnswerRefined => "answer:refined",
            AnswerDoc => "answer:top-doc",
            AnswerHead => "answer:head",
            AnswerClose => "</answer>",
        }
    }

    pub fn alphabet() -> Vec<String> {
        Self::ALL.iter().map(|s| s.name().to_string()).collect()
    }

    fn closing(tag: ActionTag) -> Self {
        match tag {
            ActionTag::Think => AgentSymbol::ThinkClose,
            ActionTag::Search => AgentSymbol::SearchClose,
            ActionTag::Documents => AgentSymbol::DocumentsClose,
            ActionTag::Refine => AgentSymbol::RefineClose,
            ActionTag::Answer => AgentSymbol::AnswerClose,
        }
    }
}

fn bits(symbols: &[AgentSymbol]) -> u64 {
    symbols.iter().fold(0, |m, s| m | 1 << s.id())
}

/// Symbols the grammar allows after `prev`. `None` means generation must stop.
pub fn allowed_after(prev: AgentSymbol, allow_refine: bool) -> Option<u64> {
    use AgentSymbol::*;
    let mask = match prev {
        Bos | ThinkClose | DocumentsClose | RefineClose => {
            let mut opens = vec![SearchOpen, AnswerOpen];
            if prev != ThinkClose {
                opens.push(ThinkOpen);
            }
            if allow_refine && prev == DocumentsClose {
                opens.push(RefineOpen);
            }
            bits(&opens)
        }
        ThinkOpen => bits(&[ThinkPlan]),
        ThinkPlan => bits(&[ThinkClose]),
        SearchOpen => bits(&[QueryHop, QueryQuestion, QueryHead]),
        QueryHop | QueryQuestion | QueryHead => bits(&[SearchClose]),
        RefineOpen => bits(&[RefineTop, RefineLast]),
        RefineTop | RefineLast => bits(&[RefineClose]),
        AnswerOpen => bits(&[AnswerRefined, AnswerDoc, AnswerHead]),
        AnswerRefined | AnswerDoc | AnswerHead => bits(&[AnswerClose]),
        SearchClose | AnswerClose | DocumentsOpen | ObsNone | ObsPartial | ObsComplete => return None,
    };
    Some(mask)
}

/// Follows the question's relation chain through facts stated in refine
/// blocks.
#[derive(Debug, Clone)]
pub struct FactTracker {
    chain: Option<ChainQuestion>,
    current: String,
    resolved: usize,
}

impl FactTracker {
    pub fn new(question: &str) -> Self {
        let chain = ChainQuestion::parse(question);
        let current = chain.as_ref().map(|c| c.head.clone()).unwrap_or_default();
        FactTracker {
            chain,
            current,
            resolved: 0,
        }
    }

    pub fn observe(&mut self, text: &str) {
        let Some(chain) = &self.chain else { return };
        for fact in parse_facts(text) {
            if self.resolved < chain.relations.len()
                && fact.relation == chain.relations[self.resolved]
                && fact.subject == self.current
            {
                self.current = fact.object;
                self.resolved += 1;
            }
        }
    }

    pub fn observation(&self) -> AgentSymbol {
        match &self.chain {
            Some(c) if self.resolved == c.relations.len() => AgentSymbol::ObsComplete,
            Some(_) if self.resolved > 0 => AgentSymbol::ObsPartial,
            _ => AgentSymbol::ObsNone,
        }
    }

    /// Entity reached so far, if any hop has been resolved.
    pub fn resolved_entity(&self) -> Option<&str> {
        (self.resolved > 0).then_some(self.current.as_str())
    }

    pub fn next_hop_query(&self) -> Option<String> {
        let chain = self.chain.as_ref()?;
        let rel = &chain.relations[self.resolved.min(chain.relations.len() - 1)];
        Some(format!("{rel} of {}", self.current))
    }

    pub fn head(&self) -> Option<&str> {
        self.chain.as_ref().map(|c| c.head.as_str())
    }
}

/// Bodies of the documents in a rendered documents block.
pub fn document_bodies(block: &str) -> Vec<&str> {
    static DOC: OnceLock<Regex> = OnceLock::new();
    let re = DOC.get_or_init(|| Regex::new(r"(?m)^\[Doc \d+: [^\]\n]*\] ?(.*)$").unwrap());
    re.captures_iter(block).map(|c| c.get(1).unwrap().as_str()).collect()
}

const UNKNOWN: &str = "unknown";
const NOTHING_FOUND: &str = "Nothing relevant was found.";
const PLAN_TEXT: &str = "I need to find the next missing fact.";

/// Drives a [`ToySoftmaxPolicy`] over the [`AgentSymbol`] alphabet.
#[derive(Debug, Clone, Copy)]
pub struct ToySearchAgent<'a> {
    policy: &'a ToySoftmaxPolicy,
}

impl<'a> ToySearchAgent<'a> {
    pub fn new(policy: &'a ToySoftmaxPolicy) -> Result<Self, PolicyError> {
        if policy.alphabet() != AgentSymbol::alphabet().as_slice() {
            return Err(PolicyError::InvalidRequest(
                "policy alphabet is not the agent alphabet".into(),
            ));
        }
        Ok(ToySearchAgent { policy })
    }

    /// A fresh agent policy with uniform logits.
    pub fn untrained() -> ToySoftmaxPolicy {
        ToySoftmaxPolicy::uniform(AgentSymbol::alphabet())
    }

    pub fn policy(&self) -> &ToySoftmaxPolicy {
        self.policy
    }
}

struct EpisodeView {
    tracker: FactTracker,
    prev: AgentSymbol,
    last_docs: Vec<String>,
}

fn view(question: &str, steps: &[Step]) -> EpisodeView {
    let mut tracker = FactTracker::new(question);
    let mut last_docs = Vec::new();
    for s in steps {
        match s.tag {
            ActionTag::Refine => tracker.observe(&s.content),
            ActionTag::Documents => last_docs = document_bodies(&s.content).into_iter().map(str::to_string).collect(),
            _ => {}
        }
    }
    let prev = steps.last().map_or(AgentSymbol::Bos, |s| AgentSymbol::closing(s.tag));
    EpisodeView {
        tracker,
        prev,
        last_docs,
    }
}

fn surface(sym: AgentSymbol, v: &EpisodeView, question: &str) -> String {
    use AgentSymbol::*;
    let padded = |s: &str| format!(" {s} ");
    match sym {
        ThinkOpen => ActionTag::Think.open().to_string(),
        SearchOpen => ActionTag::Search.open().to_string(),
        RefineOpen => ActionTag::Refine.open().to_string(),
        AnswerOpen => ActionTag::Answer.open().to_string(),
        ThinkClose => ActionTag::Think.close().to_string(),
        SearchClose => ActionTag::Search.close().to_string(),
        RefineClose => ActionTag::Refine.close().to_string(),
        AnswerClose => ActionTag::Answer.close().to_string(),
        ThinkPlan => padded(PLAN_TEXT),
        QueryHop => padded(&v.tracker.next_hop_query().unwrap_or_else(|| question.to_string())),
        QueryQuestion => padded(question),
        QueryHead => padded(v.tracker.head().unwrap_or(question)),
        RefineTop => padded(v.last_docs.first().map_or(NOTHING_FOUND, String::as_str)),
        RefineLast => padded(v.last_docs.last().map_or(NOTHING_FOUND, String::as_str)),
        AnswerRefined => padded(v.tracker.resolved_entity().unwrap_or(UNKNOWN)),
        AnswerDoc => {
            let obj = v
                .last_docs
                .first()
                .and_then(|d| parse_facts(d).into_iter().next())
                .map(|f| f.object);
            padded(obj.as_deref().unwrap_or(UNKNOWN))
        }
        AnswerHead => padded(v.tracker.head().unwrap_or(UNKNOWN)),
        Bos | ObsNone | ObsPartial | ObsComplete | DocumentsOpen | DocumentsClose => String::new(),
    }
}

impl Policy for ToySearchAgent<'_> {
    fn generate(&self, req: &GenerationRequest, rng: &mut dyn RngCore) -> Result<PolicySample, PolicyError> {
        req.validate()?;
        let parsed = parse_steps(req.response(), ParseMode::Lenient);
        let mut v = view(&req.question, &parsed.steps);
        let mut out = PolicySample {
            logprobs: Some(Vec::new()),
            token_contexts: Some(Vec::new()),
            ..Default::default()
        };
        let mut refine_start: Option<usize> = None;
        while let Some(allowed) = allowed_after(v.prev, req.allow_refine) {
            let obs = v.tracker.observation();
            let ctx = self.policy.context_id(obs.id(), v.prev.id());
            let id = self.policy.sample(ctx, allowed, req.temperature, rng);
            let sym = AgentSymbol::from_id(id).expect("sampled id inside alphabet");
            let piece = surface(sym, &v, &req.question);
            let mut candidate = out.text.clone();
            candidate.push_str(&piece);
            if whitespace_token_count(&candidate) > req.max_new_tokens {
                break;
            }
            out.text = candidate;
            out.tokens.push(id);
            out.logprobs
                .as_mut()
                .unwrap()
                .push(self.policy.logprob(ctx, allowed, id));
            out.token_contexts
                .as_mut()
                .unwrap()
                .push(TokenContext { context: ctx, allowed });
            match sym {
                AgentSymbol::RefineOpen => refine_start = Some(out.text.len()),
                AgentSymbol::RefineClose => {
                    if let Some(start) = refine_start.take() {
                        let content_end = out.text.len() - ActionTag::Refine.close().len();
                        let content = out.text[start..content_end].to_string();
                        v.tracker.observe(&content);
                    }
                }
                _ => {}
            }
            v.prev = sym;
            if let Some(stop) = req
                .stop_sequences
                .iter()
                .find(|s| !s.is_empty() && out.text.ends_with(s.as_str()))
            {
                out.stop_hit = Some(stop.clone());
                break;
            }
        }
        Ok(out)
    }
}
