#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use refine_loop::evalkit::run_dataset;
use refine_loop::grpo::{train, BatchRollout, BatchToken, GroupBatch, GrpoConfig, TrainSetup, TrainStats};
use refine_loop::policy::{ToySearchAgent, ToySoftmaxPolicy};
use refine_loop::retrieval::{Document, RetrievalConfig, RetrievalIndex, DEFAULT_B, DEFAULT_K1};
use refine_loop::rewards::{QaExample, RewardMode};
use refine_loop::rollout::RolloutConfig;
use refine_loop::synthkb::{generate_world, World, WorldSpec};
use refine_loop::trajectory::TrajectoryLog;

pub const TRAIN_SEEDS: [u64; 3] = [1, 2, 3];
pub const EVAL_PASSES: u64 = 5;
pub const EVAL_SEED: u64 = 1000;

pub fn world(spec: &WorldSpec) -> (World, RetrievalIndex) {
    let w = generate_world(spec).expect("world");
    let index = RetrievalIndex::build(w.corpus.clone(), DEFAULT_K1, DEFAULT_B).expect("index");
    (w, index)
}

pub fn train_agent(
    world: &World,
    index: &RetrievalIndex,
    reward: RewardMode,
    grpo: GrpoConfig,
    seed: u64,
) -> (ToySoftmaxPolicy, Vec<TrainStats>) {
    let setup = TrainSetup {
        train: &world.train,
        index,
        rollout: RolloutConfig::default(),
        retrieval: RetrievalConfig::default(),
        reward,
        grpo,
    };
    train(ToySearchAgent::untrained(), &setup, seed, |_| {}).expect("training")
}

/// `EVAL_PASSES` sampled rollouts per question.
pub fn eval_logs(policy: &ToySoftmaxPolicy, index: &RetrievalIndex, data: &[QaExample]) -> Vec<TrajectoryLog> {
    let agent = ToySearchAgent::new(policy).unwrap();
    (0..EVAL_PASSES)
        .flat_map(|p| {
            run_dataset(
                &agent,
                index,
                data,
                &RolloutConfig::default(),
                &RetrievalConfig::default(),
                EVAL_SEED + p,
            )
            .unwrap()
        })
        .collect()
}

fn oracle_terms(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Scores every document against every query term from scratch.
pub fn bm25_brute(docs: &[Document], query: &str, k1: f64, b: f64, k: usize) -> Vec<(String, f64)> {
    let toks: Vec<Vec<String>> = docs
        .iter()
        .map(|d| oracle_terms(&format!("{} {}", d.title, d.body)))
        .collect();
    let n = docs.len() as f64;
    let avgdl = toks.iter().map(|t| t.len() as f64).sum::<f64>() / n;
    let mut qterms: Vec<String> = Vec::new();
    for t in oracle_terms(query) {
        if !qterms.contains(&t) {
            qterms.push(t);
        }
    }
    let mut scored = Vec::new();
    for (d, t) in docs.iter().zip(&toks) {
        let mut score = 0.0;
        let mut matched = false;
        for q in &qterms {
            let tf = t.iter().filter(|x| *x == q).count() as f64;
            if tf == 0.0 {
                continue;
            }
            matched = true;
            let df = toks.iter().filter(|tt| tt.contains(q)).count() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * t.len() as f64 / avgdl));
        }
        if matched {
            scored.push((d.id.clone(), score));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Word-set F1, `2|P ∩ G| / (|P| + |G|)`, by explicit enumeration of both sets.
pub fn set_f1_brute(pred: &[&str], gold: &[&str]) -> f64 {
    let p: BTreeSet<&str> = pred.iter().copied().collect();
    let g: BTreeSet<&str> = gold.iter().copied().collect();
    let mut common = 0;
    for w in &p {
        for v in &g {
            if w == v {
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    (2 * common) as f64 / (p.len() + g.len()) as f64
}

/// Random toy policy of `a` symbols and a random batch over it. Old
/// log-probabilities lie within 0.4 of the live ones, on both sides of the
/// clip range.
pub fn random_problem(rng: &mut impl Rng, a: usize) -> (ToySoftmaxPolicy, GroupBatch) {
    let alphabet: Vec<String> = (0..a).map(|i| format!("s{i}")).collect();
    let logits: Vec<f64> = (0..a * a * a).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let policy = ToySoftmaxPolicy::from_logits(alphabet, logits).unwrap();
    let n_rollouts = rng.gen_range(2..=5);
    let mut rollouts = Vec::new();
    for _ in 0..n_rollouts {
        let len = rng.gen_range(1..=8);
        let mut tokens = Vec::new();
        for _ in 0..len {
            let context = rng.gen_range(0..(a * a) as u32);
            let symbol = rng.gen_range(0..a as u32);
            let mut allowed: u64 = rng.gen_range(0..(1u64 << a));
            allowed |= 1 << symbol;
            let live = policy.logprob(context, allowed, symbol);
            tokens.push(BatchToken {
                symbol,
                context,
                allowed,
                old_logprob: live + rng.gen_range(-0.4..0.4),
                ref_logprob: live + rng.gen_range(-1.0..1.0),
                mask: rng.gen_bool(0.7),
            });
        }
        rollouts.push(BatchRollout {
            tokens,
            reward: rng.gen(),
            advantage: rng.gen_range(-2.0..2.0),
        });
    }
    (policy, GroupBatch { rollouts })
}

/// Distance of the closest unmasked ratio from a clip boundary.
pub fn boundary_gap(policy: &ToySoftmaxPolicy, batch: &GroupBatch, eps: f64) -> f64 {
    batch
        .rollouts
        .iter()
        .flat_map(|r| r.tokens.iter().filter(|t| t.mask))
        .map(|t| {
            let ratio = (policy.logprob(t.context, t.allowed, t.symbol) - t.old_logprob).exp();
            (ratio - (1.0 - eps)).abs().min((ratio - (1.0 + eps)).abs())
        })
        .fold(f64::INFINITY, f64::min)
}

/// Max componentwise relative error between analytic and central-difference
/// gradients.
pub fn fd_relative_error(policy: &ToySoftmaxPolicy, batch: &GroupBatch, cfg: &GrpoConfig, h: f64) -> f64 {
    use refine_loop::grpo::{gradient, surrogate_loss};
    let analytic = gradient(batch, policy, cfg).unwrap();
    let mut worst: f64 = 0.0;
    let mut p = policy.clone();
    for i in 0..policy.n_params() {
        let orig = p.params()[i];
        p.params_mut()[i] = orig + h;
        let up = surrogate_loss(batch, &p, cfg).unwrap().0;
        p.params_mut()[i] = orig - h;
        let down = surrogate_loss(batch, &p, cfg).unwrap().0;
        p.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

pub fn by_hops<'a>(logs: &'a [TrajectoryLog], data: &'a [QaExample]) -> HashMap<u32, Vec<&'a TrajectoryLog>> {
    let hops: HashMap<&str, u32> = data.iter().map(|q| (q.id.as_str(), q.hops.unwrap_or(0))).collect();
    let mut out: HashMap<u32, Vec<&TrajectoryLog>> = HashMap::new();
    for l in logs {
        out.entry(hops[l.id.as_str()]).or_default().push(l);
    }
    out
}
