//! Tag grammar for reasoning trajectories.
//!
//! A trajectory is a flat sequence of tagged blocks:
//!
//! ```text
//! <think>..</think><search>..</search><documents>..</documents><refine>..</refine><answer>..</answer>
//! ```
//!
//! Blocks never nest. `documents` blocks are injected by the rollout engine;
//! every other block comes from the policy. Tags are matched case-sensitively
//! and carry no attributes.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::Document;
use crate::tokenize::whitespace_token_count;

/// Action kind of a reasoning step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionTag {
    Think,
    Search,
    Documents,
    Refine,
    Answer,
}

impl ActionTag {
    pub const ALL: [ActionTag; 5] = [
        ActionTag::Think,
        ActionTag::Search,
        ActionTag::Documents,
        ActionTag::Refine,
        ActionTag::Answer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionTag::Think => "think",
            ActionTag::Search => "search",
            ActionTag::Documents => "documents",
            ActionTag::Refine => "refine",
            ActionTag::Answer => "answer",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ActionTag::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn open(self) -> &'static str {
        match self {
            ActionTag::Think => "<think>",
            ActionTag::Search => "<search>",
            ActionTag::Documents => "<documents>",
            ActionTag::Refine => "<refine>",
            ActionTag::Answer => "<answer>",
        }
    }

    pub fn close(self) -> &'static str {
        match self {
            ActionTag::Think => "</think>",
            ActionTag::Search => "</search>",
            ActionTag::Documents => "</documents>",
            ActionTag::Refine => "</refine>",
            ActionTag::Answer => "</answer>",
        }
    }

    /// The origin every step with this tag must have.
    pub fn origin(self) -> Origin {
        match self {
            ActionTag::Documents => Origin::Engine,
            _ => Origin::Policy,
        }
    }
}

impl fmt::Display for ActionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Policy,
    Engine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub tag: ActionTag,
    pub content: String,
    pub origin: Origin,
}

impl Step {
    pub fn new(tag: ActionTag, content: impl Into<String>) -> Self {
        Step {
            tag,
            content: content.into(),
            origin: tag.origin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Answered,
    LengthBudget,
    SearchBudgetThenNoAnswer,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question: String,
    pub steps: Vec<Step>,
    pub terminated: bool,
    pub termination_reason: Option<TerminationReason>,
}

impl Trajectory {
    pub fn count(&self, tag: ActionTag) -> usize {
        self.steps.iter().filter(|s| s.tag == tag).count()
    }

    pub fn contents(&self, tag: ActionTag) -> impl Iterator<Item = &str> {
        self.steps
            .iter()
            .filter(move |s| s.tag == tag)
            .map(|s| s.content.as_str())
    }
}

/// Quantities the reward functions and analytics read off a trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedOutputs {
    pub final_answer: Option<String>,
    pub refine_concat: String,
    pub counts: BTreeMap<ActionTag, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Any deviation from the grammar is an error.
    #[default]
    Strict,
    /// Stray text between blocks, unknown tags outside blocks and anything
    /// after the first answer are dropped.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unbalanced tag `{tag}` at byte {offset}")]
    UnbalancedTag { tag: String, offset: usize },
    #[error("tag `{inner}` nested inside `{outer}` at byte {offset}")]
    NestedTag {
        outer: ActionTag,
        inner: String,
        offset: usize,
    },
    #[error("unknown tag `{tag}` at byte {offset}")]
    UnknownTag { tag: String, offset: usize },
    #[error("answer block is not the last step (byte {offset})")]
    AnswerNotLast { offset: usize },
    #[error("text outside any block at byte {offset}")]
    StrayText { offset: usize },
}

/// One tag-shaped token found in the raw text.
#[derive(Debug)]
struct TagToken<'a> {
    start: usize,
    end: usize,
    name: &'a str,
    closing: bool,
}

/// Finds the next `<name>` or `</name>` literal at or after `from`, where
/// `name` is an identifier (`[A-Za-z_][A-Za-z0-9_-]*`). Anything else that
/// starts with `<` is plain text.
fn next_tag(raw: &str, from: usize) -> Option<TagToken<'_>> {
    let bytes = raw.as_bytes();
    let mut i = from;
    while let Some(rel) = raw[i..].find('<') {
        let start = i + rel;
        let mut j = start + 1;
        let closing = bytes.get(j) == Some(&b'/');
        if closing {
            j += 1;
        }
        let name_start = j;
        if j < bytes.len() && (bytes[j].is_ascii_alphabetic() || bytes[j] == b'_') {
            j += 1;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_' || bytes[j] == b'-') {
                j += 1;
            }
            if bytes.get(j) == Some(&b'>') {
                return Some(TagToken {
                    start,
                    end: j + 1,
                    name: &raw[name_start..j],
                    closing,
                });
            }
        }
        i = start + 1;
    }
    None
}

/// Result of a best-effort parse: the steps recognised before the first
/// error, and that error if there was one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialParse {
    pub steps: Vec<Step>,
    pub error: Option<ParseError>,
}

/// Parses as far as the grammar allows.
pub fn parse_steps(raw: &str, mode: ParseMode) -> PartialParse {
    let mut steps: Vec<Step> = Vec::new();
    let mut cursor = 0usize;
    let mut open: Option<(ActionTag, usize)> = None;
    let mut search_from = 0usize;

    macro_rules! fail {
        ($err:expr) => {
            return PartialParse {
                steps,
                error: Some($err),
            }
        };
    }

    loop {
        let tok = next_tag(raw, search_from);
        match open {
            Some((tag, content_start)) => {
                let Some(tok) = tok else {
                    fail!(ParseError::UnbalancedTag {
                        tag: tag.open().to_string(),
                        offset: content_start - tag.open().len(),
                    });
                };
                match ActionTag::from_name(tok.name) {
                    Some(t) if tok.closing && t == tag => {
                        steps.push(Step::new(tag, &raw[content_start..tok.start]));
                        open = None;
                        cursor = tok.end;
                        search_from = tok.end;
                    }
                    Some(t) if tok.closing => fail!(ParseError::UnbalancedTag {
                        tag: t.close().to_string(),
                        offset: tok.start,
                    }),
                    Some(_) => fail!(ParseError::NestedTag {
                        outer: tag,
                        inner: raw[tok.start..tok.end].to_string(),
                        offset: tok.start,
                    }),
                    None => match mode {
                        ParseMode::Strict => fail!(ParseError::UnknownTag {
                            tag: raw[tok.start..tok.end].to_string(),
                            offset: tok.start,
                        }),
                        // Unknown tag-shaped text is kept as content.
                        ParseMode::Lenient => search_from = tok.end,
                    },
                }
            }
            None => {
                let gap_end = tok.as_ref().map_or(raw.len(), |t| t.start);
                let gap = &raw[cursor..gap_end];
                let stray = !gap.trim().is_empty();
                let answered = steps.last().is_some_and(|s| s.tag == ActionTag::Answer);

                if answered && (stray || tok.is_some()) {
                    match mode {
                        ParseMode::Strict => fail!(ParseError::AnswerNotLast {
                            offset: if stray { cursor } else { gap_end },
                        }),
                        ParseMode::Lenient => break,
                    }
                }
                if stray {
                    if steps.is_empty() {
                        steps.push(Step::new(ActionTag::Think, gap));
                    } else if mode == ParseMode::Strict {
                        fail!(ParseError::StrayText { offset: cursor });
                    }
                }
                let Some(tok) = tok else { break };
                match ActionTag::from_name(tok.name) {
                    Some(t) if !tok.closing => {
                        open = Some((t, tok.end));
                        search_from = tok.end;
                    }
                    Some(t) => fail!(ParseError::UnbalancedTag {
                        tag: t.close().to_string(),
                        offset: tok.start,
                    }),
                    None => match mode {
                        ParseMode::Strict => fail!(ParseError::UnknownTag {
                            tag: raw[tok.start..tok.end].to_string(),
                            offset: tok.start,
                        }),
                        ParseMode::Lenient => {
                            cursor = tok.end;
                            search_from = tok.end;
                        }
                    },
                }
            }
        }
    }
    PartialParse { steps, error: None }
}

/// Parses a generated response (the text after the prompt) into a trajectory.
///
/// Whitespace-only gaps between blocks are ignored. Non-blank text before the
/// first tag becomes a leading `think` step. The result is marked terminated
/// with reason `answered` iff the last step is an answer; other termination
/// reasons are assigned by the rollout engine.
pub fn parse_trajectory(raw: &str, question: &str, mode: ParseMode) -> Result<Trajectory, ParseError> {
    let parsed = parse_steps(raw, mode);
    if let Some(err) = parsed.error {
        return Err(err);
    }
    Ok(from_steps(question, parsed.steps))
}

fn from_steps(question: &str, steps: Vec<Step>) -> Trajectory {
    let answered = steps.last().is_some_and(|s| s.tag == ActionTag::Answer);
    Trajectory {
        question: question.to_string(),
        steps,
        terminated: answered,
        termination_reason: answered.then_some(TerminationReason::Answered),
    }
}

pub fn derive_outputs(t: &Trajectory) -> DerivedOutputs {
    let final_answer = match t.termination_reason {
        Some(TerminationReason::Answered) => t
            .steps
            .last()
            .filter(|s| s.tag == ActionTag::Answer)
            .map(|s| s.content.trim().to_string()),
        _ => None,
    };
    let refine_concat = t
        .contents(ActionTag::Refine)
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(" ");
    let counts = ActionTag::ALL.into_iter().map(|tag| (tag, t.count(tag))).collect();
    DerivedOutputs {
        final_answer,
        refine_concat,
        counts,
    }
}

pub fn serialize_steps(steps: &[Step]) -> String {
    let mut out = String::new();
    for s in steps {
        out.push_str(s.tag.open());
        out.push_str(&s.content);
        out.push_str(s.tag.close());
    }
    out
}

pub fn serialize_trajectory(t: &Trajectory) -> String {
    serialize_steps(&t.steps)
}

/// Whitespace token count of each block's content.
pub fn block_token_counts(t: &Trajectory) -> impl Iterator<Item = (ActionTag, usize)> + '_ {
    t.steps.iter().map(|s| (s.tag, whitespace_token_count(&s.content)))
}

/// One rollout as persisted in a trajectory log (one JSON object per line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub steps: Vec<Step>,
    pub termination_reason: Option<TerminationReason>,
    /// Documents returned by each search, in order; `null` marks a search that
    /// hit the search budget and was not executed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved: Option<Vec<Option<Vec<Document>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl TrajectoryLog {
    /// Logs without a termination reason are read like parsed text.
    pub fn trajectory(&self) -> Trajectory {
        match self.termination_reason {
            Some(reason) => Trajectory {
                question: self.question.clone(),
                steps: self.steps.clone(),
                terminated: true,
                termination_reason: Some(reason),
            },
            None => from_steps(&self.question, self.steps.clone()),
        }
    }

    pub fn retrieved_docs(&self) -> Vec<Option<Vec<Document>>> {
        self.retrieved.clone().unwrap_or_default()
    }
}

/// Checks the structural invariants of an engine-produced trajectory: step
/// origins match their tags, contents carry no tag literal, every search is
/// immediately followed by a documents block, and an answered trajectory ends
/// with its answer.
pub fn check_invariants(t: &Trajectory) -> Result<(), String> {
    for (i, s) in t.steps.iter().enumerate() {
        if s.origin != s.tag.origin() {
            return Err(format!("step {i}: origin {:?} for tag {}", s.origin, s.tag));
        }
        for tag in ActionTag::ALL {
            if s.content.contains(tag.open()) || s.content.contains(tag.close()) {
                return Err(format!("step {i}: content contains a {tag} tag literal"));
            }
        }
        if s.tag == ActionTag::Search && t.steps.get(i + 1).map(|n| n.tag) != Some(ActionTag::Documents) {
            return Err(format!("step {i}: search not followed by documents"));
        }
    }
    if t.termination_reason == Some(TerminationReason::Answered)
        && t.steps.last().map(|s| s.tag) != Some(ActionTag::Answer)
    {
        return Err("answered trajectory does not end with an answer".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str =
        "<think>plan</think><search>q</search><documents>d</documents><refine>r</refine><answer>x</answer>";

    #[test]
    fn minimal_cycle() {
        let t = parse_trajectory(MINIMAL, "Q", ParseMode::Strict).unwrap();
        assert_eq!(t.steps.len(), 5);
        assert!(t.terminated);
        assert_eq!(t.termination_reason, Some(TerminationReason::Answered));
        assert_eq!(t.steps[2].origin, Origin::Engine);
        assert_eq!(serialize_trajectory(&t), MINIMAL);
    }

    #[test]
    fn missing_close_is_unbalanced() {
        let err = parse_trajectory("<think>plan</think><search>q", "Q", ParseMode::Strict).unwrap_err();
        assert!(matches!(err, ParseError::UnbalancedTag { ref tag, offset: 19 } if tag == "<search>"));
        let err = parse_trajectory("<think>plan</think><search>q", "Q", ParseMode::Lenient).unwrap_err();
        assert!(matches!(err, ParseError::UnbalancedTag { .. }));
    }

    #[test]
    fn stray_close_is_unbalanced() {
        let err = parse_trajectory("</think>", "Q", ParseMode::Strict).unwrap_err();
        assert!(matches!(err, ParseError::UnbalancedTag { .. }));
        let err = parse_trajectory("<think>a</search>", "Q", ParseMode::Strict).unwrap_err();
        assert!(matches!(err, ParseError::UnbalancedTag { ref tag, .. } if tag == "</search>"));
    }

    #[test]
    fn nested_tags_rejected() {
        let err = parse_trajectory("<think>a<search>b</search></think>", "Q", ParseMode::Lenient).unwrap_err();
        assert!(matches!(
            err,
            ParseError::NestedTag {
                outer: ActionTag::Think,
                ..
            }
        ));
    }

    #[test]
    fn unknown_tags() {
        let err = parse_trajectory("<think>a</think><tool>x</tool>", "Q", ParseMode::Strict).unwrap_err();
        assert!(matches!(err, ParseError::UnknownTag { ref tag, .. } if tag == "<tool>"));
        // Case-sensitive matching: <Think> is not a grammar tag.
        let err = parse_trajectory("<Think>a</Think>", "Q", ParseMode::Strict).unwrap_err();
        assert!(matches!(err, ParseError::UnknownTag { .. }));

        let t = parse_trajectory("<think>a <b> c</think><answer>x</answer>", "Q", ParseMode::Lenient).unwrap();
        assert_eq!(t.steps[0].content, "a <b> c");
    }

    #[test]
    fn angle_brackets_that_are_not_tags_are_text() {
        let t = parse_trajectory("<think>1 < 2 and <think foo> x</think>", "Q", ParseMode::Strict).unwrap();
        assert_eq!(t.steps[0].content, "1 < 2 and <think foo> x");
    }

    #[test]
    fn answer_not_last() {
        let raw = "<answer>x</answer><think>more</think>";
        let err = parse_trajectory(raw, "Q", ParseMode::Strict).unwrap_err();
        assert!(matches!(err, ParseError::AnswerNotLast { offset: 18 }));
        let t = parse_trajectory(raw, "Q", ParseMode::Lenient).unwrap();
        assert_eq!(t.steps.len(), 1);
        assert!(t.terminated);

        let err = parse_trajectory("<answer>x</answer>.", "Q", ParseMode::Strict).unwrap_err();
        assert!(matches!(err, ParseError::AnswerNotLast { .. }));
    }

    #[test]
    fn leading_text_becomes_think() {
        let t = parse_trajectory("Let me see. <answer>x</answer>", "Q", ParseMode::Strict).unwrap();
        assert_eq!(t.steps[0], Step::new(ActionTag::Think, "Let me see. "));
        assert_eq!(t.steps[1].tag, ActionTag::Answer);
    }

    #[test]
    fn interior_stray_text() {
        let raw = "<think>a</think> oops <answer>x</answer>";
        let err = parse_trajectory(raw, "Q", ParseMode::Strict).unwrap_err();
        assert!(matches!(err, ParseError::StrayText { offset: 16 }));
        let t = parse_trajectory(raw, "Q", ParseMode::Lenient).unwrap();
        assert_eq!(t.steps.len(), 2);
    }

    #[test]
    fn whitespace_between_blocks_is_ignored() {
        let t = parse_trajectory("<think> a </think>\n\n<answer>x</answer>\n", "Q", ParseMode::Strict).unwrap();
        assert_eq!(t.steps.len(), 2);
        assert_eq!(t.steps[0].content, " a ");
    }

    #[test]
    fn partial_parse_keeps_completed_steps() {
        let p = parse_steps("<refine>r</refine><search>q", ParseMode::Strict);
        assert_eq!(p.steps, vec![Step::new(ActionTag::Refine, "r")]);
        assert!(p.error.is_some());
    }

    #[test]
    fn derive_concat_and_counts() {
        let t = Trajectory {
            question: "Q".into(),
            steps: vec![
                Step::new(ActionTag::Refine, "A was B."),
                Step::new(ActionTag::Search, "q"),
                Step::new(ActionTag::Documents, "d"),
                Step::new(ActionTag::Refine, " B died 1426. "),
            ],
            terminated: true,
            termination_reason: Some(TerminationReason::LengthBudget),
        };
        let d = derive_outputs(&t);
        assert_eq!(d.refine_concat, "A was B. B died 1426.");
        assert_eq!(d.final_answer, None);
        assert_eq!(d.counts[&ActionTag::Refine], 2);
        assert_eq!(d.counts[&ActionTag::Answer], 0);
        assert_eq!(d.counts.len(), 5);
    }

    #[test]
    fn empty_trajectory_serializes_to_empty_text() {
        let t = Trajectory {
            question: "Q".into(),
            steps: vec![],
            terminated: false,
            termination_reason: None,
        };
        assert_eq!(serialize_trajectory(&t), "");
        let back = parse_trajectory("", "Q", ParseMode::Strict).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn invariants_detect_unpaired_search() {
        let mut t = parse_trajectory(MINIMAL, "Q", ParseMode::Strict).unwrap();
        assert!(check_invariants(&t).is_ok());
        t.steps.remove(2);
        assert!(check_invariants(&t).is_err());
    }

    #[test]
    fn log_roundtrip_json() {
        let t = parse_trajectory(MINIMAL, "Q", ParseMode::Strict).unwrap();
        let log = TrajectoryLog {
            id: "q1".into(),
            question: "Q".into(),
            gold_answers: vec!["x".into()],
            steps: t.steps.clone(),
            termination_reason: t.termination_reason,
            retrieved: None,
            seed: Some(3),
        };
        let line = serde_json::to_string(&log).unwrap();
        assert!(line.contains(r#""tag":"documents""#));
        assert!(line.contains(r#""origin":"engine""#));
        assert!(line.contains(r#""termination_reason":"answered""#));
        let back: TrajectoryLog = serde_json::from_str(&line).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.trajectory(), t);
    }
}
