//! Answer reward, retrieval reward and their combination.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::retrieval::Document;
use crate::tokenize::terms;
use crate::trajectory::{derive_outputs, Trajectory};

/// Partial credit for a wrong answer whose refinements captured the gold.
pub const PARTIAL_REWARD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub split: String,
    /// Chain length for synthetic multi-hop questions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Refine,
    Documents,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combination {
    #[default]
    Nonlinear,
    Linear,
    AnswerOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Cover,
    TokenRecall,
    WordRecall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardMode {
    pub placement: Placement,
    pub combination: Combination,
    pub retrieval_granularity: Granularity,
}

impl RewardMode {
    pub fn answer_only() -> Self {
        RewardMode {
            combination: Combination::AnswerOnly,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_ans: f64,
    pub r_ret: f64,
    pub r_overall: f64,
    pub mode: RewardMode,
    pub matched_gold: Option<String>,
}

/// Lowercases, strips punctuation, drops the articles a/an/the and collapses
/// whitespace.
pub fn normalize(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn word_set(s: &str) -> BTreeSet<String> {
    normalize(s)
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// F1 between two word sets: `2|P ∩ G| / (|P| + |G|)`, zero when both are empty.
pub fn set_f1(pred: &BTreeSet<String>, gold: &BTreeSet<String>) -> f64 {
    let denom = pred.len() + gold.len();
    if denom == 0 {
        return 0.0;
    }
    let common = pred.intersection(gold).count();
    2.0 * common as f64 / denom as f64
}

fn best_answer_match<'g>(pred: Option<&str>, gold: &'g [String]) -> (f64, Option<&'g str>) {
    let Some(pred) = pred else { return (0.0, None) };
    let p = word_set(pred);
    let mut best = (0.0, None);
    for g in gold {
        let f = set_f1(&p, &word_set(g));
        if f > best.0 {
            best = (f, Some(g.as_str()));
        }
    }
    best
}

/// Word-set F1 of the predicted answer against the best-matching gold alias.
pub fn answer_reward(pred: Option<&str>, gold: &[String]) -> f64 {
    best_answer_match(pred, gold).0
}

fn coverage(target: &str, gold: &str, granularity: Granularity) -> f64 {
    match granularity {
        Granularity::Cover => {
            let g = word_set(gold);
            if g.is_empty() {
                return 0.0;
            }
            let t = word_set(target);
            if g.is_subset(&t) {
                1.0
            } else {
                0.0
            }
        }
        Granularity::WordRecall => {
            let g = word_set(gold);
            if g.is_empty() {
                return 0.0;
            }
            let t = word_set(target);
            g.intersection(&t).count() as f64 / g.len() as f64
        }
        Granularity::TokenRecall => {
            let g = terms(gold);
            if g.is_empty() {
                return 0.0;
            }
            let t: BTreeSet<String> = terms(target).into_iter().collect();
            g.iter().filter(|tok| t.contains(*tok)).count() as f64 / g.len() as f64
        }
    }
}

/// Text the retrieval reward inspects for the given placement.
pub fn retrieval_target(t: &Trajectory, docs: &[Option<Vec<Document>>], placement: Placement) -> String {
    match placement {
        Placement::Refine => derive_outputs(t).refine_concat,
        Placement::Documents => docs
            .iter()
            .flatten()
            .flatten()
            .map(Document::indexed_text)
            .collect::<Vec<_>>()
            .join(" "),
    }
}

pub fn retrieval_reward(t: &Trajectory, docs: &[Option<Vec<Document>>], gold: &[String], mode: &RewardMode) -> f64 {
    let target = retrieval_target(t, docs, mode.placement);
    gold.iter()
        .map(|g| coverage(&target, g, mode.retrieval_granularity))
        .fold(0.0, f64::max)
}

pub fn combine(r_ans: f64, r_ret: f64, mode: &RewardMode) -> f64 {
    match mode.combination {
        Combination::Nonlinear => {
            if r_ans > 0.0 {
                r_ans
            } else if r_ret > 0.0 {
                PARTIAL_REWARD
            } else {
                0.0
            }
        }
        // Range [0, 2]; group normalization absorbs the scale.
        Combination::Linear => r_ans + r_ret,
        Combination::AnswerOnly => r_ans,
    }
}

pub fn score_trajectory(
    t: &Trajectory,
    docs: &[Option<Vec<Document>>],
    q: &QaExample,
    mode: &RewardMode,
) -> RewardBreakdown {
    let outputs = derive_outputs(t);
    let (r_ans, matched) = best_answer_match(outputs.final_answer.as_deref(), &q.gold_answers);
    let r_ret = retrieval_reward(t, docs, &q.gold_answers, mode);
    RewardBreakdown {
        r_ans,
        r_ret,
        r_overall: combine(r_ans, r_ret, mode),
        mode: *mode,
        matched_gold: matched.map(str::to_string),
    }
}

/// Reads a `QaExample` JSONL dataset.
pub fn read_dataset<R: BufRead>(r: R) -> std::io::Result<Vec<QaExample>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

pub fn index_by_id(dataset: &[QaExample]) -> HashMap<&str, &QaExample> {
    dataset.iter().map(|q| (q.id.as_str(), q)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{parse_trajectory, ActionTag, ParseMode, Step, TerminationReason};

    fn golds(g: &[&str]) -> Vec<String> {
        g.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize("The Umbrellas."), "umbrellas");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("21 January 1426"), "21 january 1426");
        assert_eq!(normalize("  An   apple, a day!  "), "apple day");
        assert_eq!(normalize("Masovia's theatre"), "masovias theatre");
    }

    #[test]
    fn answer_f1_examples() {
        let g = golds(&["Maximilian Wundt"]);
        assert_eq!(answer_reward(Some("Maximilian Wundt"), &g), 1.0);
        assert_eq!(answer_reward(Some("Wilhelm Wundt"), &g), 0.5);
        assert_eq!(answer_reward(Some("Paris"), &golds(&["London"])), 0.0);
        assert_eq!(answer_reward(None, &g), 0.0);
        assert_eq!(answer_reward(Some("the"), &golds(&["a"])), 0.0);
    }

    #[test]
    fn answer_f1_uses_sets_and_best_alias() {
        // Duplicates collapse: {wundt} vs {maximilian, wundt}.
        assert!((answer_reward(Some("Wundt Wundt"), &golds(&["Maximilian Wundt"])) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(answer_reward(Some("NYC"), &golds(&["New York", "NYC"])), 1.0);
    }

    #[test]
    fn combine_table() {
        let m = RewardMode::default();
        assert_eq!(combine(0.5, 1.0, &m), 0.5);
        assert_eq!(combine(0.0, 1.0, &m), 0.1);
        assert_eq!(combine(0.0, 0.0, &m), 0.0);
        let lin = RewardMode {
            combination: Combination::Linear,
            ..m
        };
        assert_eq!(combine(1.0, 1.0, &lin), 2.0);
        assert_eq!(combine(0.0, 1.0, &RewardMode::answer_only()), 0.0);
    }

    fn with_refines(refines: &[&str]) -> Trajectory {
        Trajectory {
            question: "q".into(),
            steps: refines.iter().map(|r| Step::new(ActionTag::Refine, *r)).collect(),
            terminated: true,
            termination_reason: Some(TerminationReason::LengthBudget),
        }
    }

    #[test]
    fn retrieval_reward_variants() {
        let cover = RewardMode::default();
        let t = with_refines(&["siemowit iv ... died on 21 january 1426"]);
        assert_eq!(retrieval_reward(&t, &[], &golds(&["21 January 1426"]), &cover), 1.0);
        assert_eq!(retrieval_reward(&with_refines(&[]), &[], &golds(&["x"]), &cover), 0.0);

        let t = with_refines(&["alpha gamma"]);
        let wr = RewardMode {
            retrieval_granularity: Granularity::WordRecall,
            ..cover
        };
        assert!((retrieval_reward(&t, &[], &golds(&["alpha beta gamma"]), &wr) - 2.0 / 3.0).abs() < 1e-15);
        let tr = RewardMode {
            retrieval_granularity: Granularity::TokenRecall,
            ..cover
        };
        assert!((retrieval_reward(&t, &[], &golds(&["alpha beta gamma"]), &tr) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(retrieval_reward(&t, &[], &golds(&["alpha beta gamma"]), &cover), 0.0);
    }

    #[test]
    fn documents_placement_reads_retrieved_docs() {
        let t = with_refines(&[]);
        let docs = vec![Some(vec![Document::new("1", "Renoir", "painted The Umbrellas")]), None];
        let m = RewardMode {
            placement: Placement::Documents,
            ..Default::default()
        };
        assert_eq!(retrieval_reward(&t, &docs, &golds(&["The Umbrellas"]), &m), 1.0);
        assert_eq!(
            retrieval_reward(&t, &docs, &golds(&["The Umbrellas"]), &RewardMode::default()),
            0.0
        );
    }

    #[test]
    fn score_examples() {
        let q = QaExample {
            id: "f2".into(),
            question: "Which painting?".into(),
            gold_answers: golds(&["The Umbrellas"]),
            split: "fixture".into(),
            hops: None,
        };
        let m = RewardMode::default();
        let right = parse_trajectory(
            "<think>t</think><search>s</search><documents>d</documents><refine>The documents conclude 'The Umbrellas'.</refine><answer>The Umbrellas</answer>",
            &q.question,
            ParseMode::Strict,
        )
        .unwrap();
        let b = score_trajectory(&right, &[], &q, &m);
        assert_eq!(b.r_overall, 1.0);
        assert_eq!(b.matched_gold.as_deref(), Some("The Umbrellas"));

        let wrong = parse_trajectory(
            "<search>s</search><documents>d</documents><refine>The documents conclude 'The Umbrellas'.</refine><answer>Pierre-Auguste Renoir</answer>",
            &q.question,
            ParseMode::Strict,
        )
        .unwrap();
        let b = score_trajectory(&wrong, &[], &q, &m);
        assert_eq!((b.r_ans, b.r_ret, b.r_overall), (0.0, 1.0, 0.1));

        let cut = with_refines(&[]);
        assert_eq!(score_trajectory(&cut, &[], &q, &m).r_overall, 0.0);
    }
}
