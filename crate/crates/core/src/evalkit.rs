//! Evaluation metrics and behavioral analytics over trajectory logs.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::Policy;
use crate::retrieval::{RetrievalConfig, RetrievalError, RetrievalIndex};
use crate::rewards::{index_by_id, normalize, QaExample};
use crate::rollout::{run_rollout, RolloutConfig, RolloutError};
use crate::trajectory::{block_token_counts, derive_outputs, ActionTag, Trajectory, TrajectoryLog};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no trajectories to evaluate")]
    EmptyLog,
    #[error("trajectory `{0}` has no matching dataset example")]
    UnknownExample(String),
    #[error("empty gold answer list for `{0}`")]
    EmptyGold(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

fn best(gold: &[String], f: impl Fn(&str) -> f64) -> f64 {
    gold.iter().map(|g| f(&normalize(g))).fold(0.0, f64::max)
}

pub fn metric_em(pred: &str, gold: &[String]) -> f64 {
    let p = normalize(pred);
    best(gold, |g| (!g.is_empty() && g == p) as u8 as f64)
}

/// Multiset word F1, maximized over gold aliases.
pub fn metric_f1(pred: &str, gold: &[String]) -> f64 {
    let p = normalize(pred);
    let mut pc: HashMap<&str, usize> = HashMap::new();
    for w in p.split_whitespace() {
        *pc.entry(w).or_default() += 1;
    }
    let plen = p.split_whitespace().count();
    best(gold, |g| {
        let glen = g.split_whitespace().count();
        if plen == 0 || glen == 0 {
            return 0.0;
        }
        let mut avail = pc.clone();
        let mut common = 0usize;
        for w in g.split_whitespace() {
            if let Some(c) = avail.get_mut(w).filter(|c| **c > 0) {
                *c -= 1;
                common += 1;
            }
        }
        if common == 0 {
            return 0.0;
        }
        let precision = common as f64 / plen as f64;
        let recall = common as f64 / glen as f64;
        2.0 * precision * recall / (precision + recall)
    })
}

/// Some normalized gold occurs as a contiguous word sequence of the
/// normalized prediction.
pub fn metric_cem(pred: &str, gold: &[String]) -> f64 {
    let p = format!(" {} ", normalize(pred));
    best(gold, |g| (!g.is_empty() && p.contains(&format!(" {g} "))) as u8 as f64)
}

/// Fraction of search calls whose documents contain some gold answer.
/// `None` when there were no searches.
pub fn search_success<S: AsRef<str>>(docs: &[S], gold: &[String]) -> Option<f64> {
    if docs.is_empty() {
        return None;
    }
    let hits = docs.iter().filter(|d| metric_cem(d.as_ref(), gold) == 1.0).count();
    Some(hits as f64 / docs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub em: f64,
    pub f1: f64,
    pub cem: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_dataset: BTreeMap<String, Metrics>,
    /// Unweighted mean over datasets.
    pub aggregate: Metrics,
}

#[derive(Default)]
struct Sums {
    em: f64,
    f1: f64,
    cem: f64,
    n: usize,
}

impl Sums {
    fn add(&mut self, pred: &str, gold: &[String]) {
        self.em += metric_em(pred, gold);
        self.f1 += metric_f1(pred, gold);
        self.cem += metric_cem(pred, gold);
        self.n += 1;
    }

    fn metrics(&self) -> Metrics {
        let n = self.n.max(1) as f64;
        Metrics {
            em: self.em / n,
            f1: self.f1 / n,
            cem: self.cem / n,
            n: self.n,
        }
    }
}

/// Looks up each log's example by id, falling back to the log's own gold.
fn resolve<'a>(
    log: &'a TrajectoryLog,
    by_id: &HashMap<&str, &'a QaExample>,
) -> Result<(&'a [String], &'a str), EvalError> {
    let (gold, split) = match by_id.get(log.id.as_str()) {
        Some(q) => (q.gold_answers.as_slice(), q.split.as_str()),
        None if !by_id.is_empty() => return Err(EvalError::UnknownExample(log.id.clone())),
        None => (log.gold_answers.as_slice(), ""),
    };
    if gold.is_empty() {
        return Err(EvalError::EmptyGold(log.id.clone()));
    }
    Ok((gold, split))
}

/// EM/F1/CEM per dataset split. A trajectory without an answer scores 0.
pub fn evaluate(logs: &[TrajectoryLog], dataset: &[QaExample]) -> Result<MetricReport, EvalError> {
    if logs.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let by_id = index_by_id(dataset);
    let mut sums: BTreeMap<String, Sums> = BTreeMap::new();
    for log in logs {
        let (gold, split) = resolve(log, &by_id)?;
        let pred = derive_outputs(&log.trajectory()).final_answer.unwrap_or_default();
        sums.entry(split.to_string()).or_default().add(&pred, gold);
    }
    let per_dataset: BTreeMap<String, Metrics> = sums.iter().map(|(k, s)| (k.clone(), s.metrics())).collect();
    let k = per_dataset.len() as f64;
    let aggregate = Metrics {
        em: per_dataset.values().map(|m| m.em).sum::<f64>() / k,
        f1: per_dataset.values().map(|m| m.f1).sum::<f64>() / k,
        cem: per_dataset.values().map(|m| m.cem).sum::<f64>() / k,
        n: per_dataset.values().map(|m| m.n).sum(),
    };
    Ok(MetricReport { per_dataset, aggregate })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub n: usize,
    /// Mean search steps per rollout.
    pub search_frequency: f64,
    /// Pooled over all search calls; `None` if no rollout searched.
    pub search_success_rate: Option<f64>,
    /// Fraction of rollouts whose concatenated refinements contain the gold.
    pub refine_success_rate: f64,
    /// Fraction of rollouts whose final answer contains the gold.
    pub answer_success_rate: f64,
    /// Mean whitespace tokens per block, by tag.
    pub mean_tokens_per_block: BTreeMap<ActionTag, f64>,
    /// Mean search steps per rollout, keyed by hop count where known.
    pub search_frequency_by_hops: BTreeMap<u32, f64>,
}

pub fn behavior_report(logs: &[TrajectoryLog], dataset: &[QaExample]) -> Result<BehaviorReport, EvalError> {
    if logs.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let by_id = index_by_id(dataset);
    let mut searches = 0usize;
    let (mut search_hits, mut search_calls) = (0.0, 0usize);
    let (mut refine_ok, mut answer_ok) = (0.0, 0.0);
    let mut tokens: BTreeMap<ActionTag, (usize, usize)> = BTreeMap::new();
    let mut by_hops: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for log in logs {
        let (gold, _) = resolve(log, &by_id)?;
        let t: Trajectory = log.trajectory();
        let n_search = t.count(ActionTag::Search);
        searches += n_search;
        let docs: Vec<&str> = t.contents(ActionTag::Documents).collect();
        if let Some(rate) = search_success(&docs, gold) {
            search_hits += rate * docs.len() as f64;
            search_calls += docs.len();
        }
        let out = derive_outputs(&t);
        refine_ok += metric_cem(&out.refine_concat, gold);
        answer_ok += metric_cem(out.final_answer.as_deref().unwrap_or(""), gold);
        for (tag, n) in block_token_counts(&t) {
            let e = tokens.entry(tag).or_default();
            e.0 += n;
            e.1 += 1;
        }
        if let Some(h) = by_id.get(log.id.as_str()).and_then(|q| q.hops) {
            let e = by_hops.entry(h).or_default();
            e.0 += n_search;
            e.1 += 1;
        }
    }
    let n = logs.len() as f64;
    Ok(BehaviorReport {
        n: logs.len(),
        search_frequency: searches as f64 / n,
        search_success_rate: (search_calls > 0).then(|| search_hits / search_calls as f64),
        refine_success_rate: refine_ok / n,
        answer_success_rate: answer_ok / n,
        mean_tokens_per_block: tokens.into_iter().map(|(k, (s, c))| (k, s as f64 / c as f64)).collect(),
        search_frequency_by_hops: by_hops
            .into_iter()
            .map(|(k, (s, c))| (k, s as f64 / c as f64))
            .collect(),
    })
}

/// One rollout per question, seeded from `seed`, run in parallel.
pub fn run_dataset<P: Policy + ?Sized>(
    policy: &P,
    index: &RetrievalIndex,
    dataset: &[QaExample],
    cfg: &RolloutConfig,
    rcfg: &RetrievalConfig,
    seed: u64,
) -> Result<Vec<TrajectoryLog>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = dataset.iter().map(|_| rng.gen()).collect();
    dataset
        .par_iter()
        .zip(seeds)
        .map(|(q, s)| Ok(run_rollout(policy, index, q, cfg, rcfg, s)?.to_log(q)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub report: MetricReport,
    pub behavior: BehaviorReport,
}

/// Evaluation rollouts at each retrieval depth, in the order given.
pub fn k_sweep<P: Policy + ?Sized>(
    policy: &P,
    index: &RetrievalIndex,
    dataset: &[QaExample],
    ks: &[usize],
    cfg: &RolloutConfig,
    rcfg: &RetrievalConfig,
    seed: u64,
) -> Result<Vec<KSweepRow>, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let cfgs: Vec<RetrievalConfig> = ks.iter().map(|&k| RetrievalConfig { top_k: k, ..*rcfg }).collect();
    for c in &cfgs {
        index.check_config(c)?;
    }
    cfgs.iter()
        .map(|c| {
            let logs = run_dataset(policy, index, dataset, cfg, c, seed)?;
            Ok(KSweepRow {
                k: c.top_k,
                report: evaluate(&logs, dataset)?,
                behavior: behavior_report(&logs, dataset)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{Step, TerminationReason};

    fn g(s: &str) -> Vec<String> {
        vec![s.to_string()]
    }

    #[test]
    fn metric_examples() {
        assert_eq!(metric_em("the umbrellas", &g("The Umbrellas")), 1.0);
        let p = "it is The Umbrellas by Renoir";
        assert_eq!(metric_cem(p, &g("The Umbrellas")), 1.0);
        assert_eq!(metric_em(p, &g("The Umbrellas")), 0.0);
        for m in [metric_em, metric_f1, metric_cem] {
            assert_eq!(m("", &g("x")), 0.0);
        }
        assert_eq!(metric_f1("a a b", &g("a b b")), 2.0 / 3.0);
        assert_eq!(metric_cem("umbrellasx", &g("umbrellas")), 0.0);
    }

    #[test]
    fn search_success_counts() {
        let gold = g("21 January 1426");
        assert_eq!(search_success(&["nothing", "on 21 January 1426."], &gold), Some(0.5));
        assert_eq!(
            search_success(&["21 January 1426", "21 january 1426"], &gold),
            Some(1.0)
        );
        assert_eq!(search_success::<&str>(&[], &gold), None);
    }

    fn log(id: &str, searches: usize, refine: &str, answer: &str) -> TrajectoryLog {
        let mut steps = Vec::new();
        for _ in 0..searches {
            steps.push(Step::new(ActionTag::Search, "q"));
            steps.push(Step::new(ActionTag::Documents, "[Doc 1: t] x"));
            steps.push(Step::new(ActionTag::Refine, refine));
        }
        steps.push(Step::new(ActionTag::Answer, answer));
        TrajectoryLog {
            id: id.into(),
            question: "Q".into(),
            gold_answers: g("gold"),
            steps,
            termination_reason: Some(TerminationReason::Answered),
            retrieved: None,
            seed: None,
        }
    }

    #[test]
    fn behavior_arithmetic() {
        let logs: Vec<TrajectoryLog> = (0..10)
            .map(|i| log(&format!("q{i}"), if i < 5 { 1 } else { 2 }, "the gold", "gold"))
            .collect();
        let b = behavior_report(&logs, &[]).unwrap();
        assert_eq!(b.search_frequency, 1.5);
        assert_eq!(b.refine_success_rate, 1.0);
        assert_eq!(b.answer_success_rate, 1.0);
        assert_eq!(b.search_success_rate, Some(0.0));
        assert!(matches!(behavior_report(&[], &[]), Err(EvalError::EmptyLog)));
    }

    #[test]
    fn aggregate_is_unweighted() {
        let mut dataset = Vec::new();
        let mut logs = Vec::new();
        for (i, (split, answer)) in [("a", "gold"), ("b", "gold"), ("b", "no"), ("b", "no"), ("b", "no")]
            .iter()
            .enumerate()
        {
            let id = format!("q{i}");
            dataset.push(QaExample {
                id: id.clone(),
                question: "Q".into(),
                gold_answers: g("gold"),
                split: split.to_string(),
                hops: None,
            });
            logs.push(log(&id, 0, "", answer));
        }
        let r = evaluate(&logs, &dataset).unwrap();
        assert_eq!(r.per_dataset["a"].em, 1.0);
        assert_eq!(r.per_dataset["b"].em, 0.25);
        assert_eq!(r.aggregate.em, 0.625);
        assert_eq!(r.aggregate.n, 5);
    }
}
