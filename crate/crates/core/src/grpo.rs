//! Group-relative policy optimization for the toy policy.
//!
//! Rewards of the G rollouts of one question are normalized into advantages;
//! each policy token then contributes a clipped ratio term and a KL penalty
//! against a frozen reference policy. Engine-injected documents tokens are
//! masked: they are skipped, never multiplied by zero, so that any change
//! confined to them leaves loss and gradient bitwise unchanged.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::policy::{FrozenPolicy, ToySearchAgent, ToySoftmaxPolicy};
use crate::retrieval::{RetrievalConfig, RetrievalIndex};
use crate::rewards::{score_trajectory, QaExample, RewardMode};
use crate::rollout::{run_group, RolloutConfig, RolloutError, RolloutRecord};
use crate::trajectory::Origin;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub clip_ratio: f64,
    pub kl_coeff: f64,
    pub group_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub std_epsilon: f64,
    /// Questions sampled per step; each contributes one group.
    pub questions_per_step: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            clip_ratio: 0.2,
            kl_coeff: 0.001,
            group_size: 5,
            learning_rate: 1e-6,
            steps: 0,
            std_epsilon: 1e-6,
            questions_per_step: 1,
        }
    }
}

impl GrpoConfig {
    /// Settings used for the toy policy.
    pub fn toy() -> Self {
        GrpoConfig {
            learning_rate: TOY_LEARNING_RATE,
            steps: 300,
            questions_per_step: TOY_QUESTIONS_PER_STEP,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.to_string()));
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad("clip_ratio must lie in (0, 1)");
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return bad("kl_coeff must be >= 0");
        }
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.std_epsilon.is_nan() || self.std_epsilon <= 0.0 {
            return bad("std_epsilon must be > 0");
        }
        if self.questions_per_step == 0 {
            return bad("questions_per_step must be >= 1");
        }
        Ok(())
    }
}

pub const TOY_LEARNING_RATE: f64 = 5.0;
pub const TOY_QUESTIONS_PER_STEP: usize = 4;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group of {0} rollouts is too small; need at least 2")]
    GroupTooSmall(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backend does not expose token-level log-probabilities")]
    BackendUnsupported,
    #[error("invalid grpo config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

/// Population mean/std normalization. A group whose std is below
/// `std_epsilon` gets all-zero advantages.
pub fn compute_advantages(rewards: &[f64], std_epsilon: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < std_epsilon {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `x - ln x - 1` with `x = pi_ref / pi_theta`.
pub fn kl_estimator(ref_logprob: f64, logprob: f64) -> f64 {
    let log_x = ref_logprob - logprob;
    log_x.exp() - log_x - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchToken {
    pub symbol: u32,
    pub context: u32,
    pub allowed: u64,
    pub old_logprob: f64,
    pub ref_logprob: f64,
    /// True for policy tokens; false for documents-block tokens.
    pub mask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRollout {
    pub tokens: Vec<BatchToken>,
    pub reward: f64,
    pub advantage: f64,
}

impl BatchRollout {
    pub fn unmasked(&self) -> impl Iterator<Item = &BatchToken> {
        self.tokens.iter().filter(|t| t.mask)
    }
}

/// Rollouts of one or more groups, each with its advantage already set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupBatch {
    pub rollouts: Vec<BatchRollout>,
}

impl GroupBatch {
    /// Builds one group from rollout records, their rewards, and the
    /// reference policy.
    pub fn from_group(
        records: &[RolloutRecord],
        rewards: &[f64],
        reference: &ToySoftmaxPolicy,
        std_epsilon: f64,
    ) -> Result<Self, GrpoError> {
        if records.len() != rewards.len() {
            return Err(GrpoError::ShapeMismatch(format!(
                "{} records but {} rewards",
                records.len(),
                rewards.len()
            )));
        }
        let advantages = compute_advantages(rewards, std_epsilon)?;
        let mut rollouts = Vec::with_capacity(records.len());
        for ((rec, &reward), &advantage) in records.iter().zip(rewards).zip(&advantages) {
            let mut tokens = Vec::new();
            for seg in &rec.segments {
                for tok in &seg.tokens {
                    if seg.origin == Origin::Engine {
                        tokens.push(BatchToken {
                            symbol: 0,
                            context: 0,
                            allowed: 0,
                            old_logprob: 0.0,
                            ref_logprob: 0.0,
                            mask: false,
                        });
                        continue;
                    }
                    let (Some(symbol), Some(ctx), Some(old)) = (tok.symbol, tok.context, tok.logprob) else {
                        return Err(GrpoError::BackendUnsupported);
                    };
                    tokens.push(BatchToken {
                        symbol,
                        context: ctx.context,
                        allowed: ctx.allowed,
                        old_logprob: old,
                        ref_logprob: reference.logprob(ctx.context, ctx.allowed, symbol),
                        mask: true,
                    });
                }
            }
            rollouts.push(BatchRollout {
                tokens,
                reward,
                advantage,
            });
        }
        Ok(GroupBatch { rollouts })
    }

    pub fn extend(&mut self, other: GroupBatch) {
        self.rollouts.extend(other.rollouts);
    }

    fn check(&self, policy: &ToySoftmaxPolicy) -> Result<(), GrpoError> {
        if self.rollouts.is_empty() {
            return Err(GrpoError::ShapeMismatch("empty batch".into()));
        }
        let a = policy.alphabet_size() as u32;
        for t in self.rollouts.iter().flat_map(BatchRollout::unmasked) {
            if t.symbol >= a || t.context >= policy.n_contexts() as u32 || t.allowed & (1 << t.symbol) == 0 {
                return Err(GrpoError::ShapeMismatch(format!(
                    "token (context {}, symbol {}) does not fit the policy",
                    t.context, t.symbol
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainStats {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

struct TokenTerm {
    value: f64,
    kl: f64,
    clipped: bool,
    /// d(term)/d(live logprob).
    dlogp: f64,
}

fn token_term(live: f64, t: &BatchToken, advantage: f64, cfg: &GrpoConfig) -> TokenTerm {
    let ratio = (live - t.old_logprob).exp();
    let clipped_ratio = ratio.clamp(1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
    let unclipped = ratio * advantage;
    let clipped = clipped_ratio * advantage;
    let (surrogate, d_surrogate, is_clipped) = if unclipped <= clipped {
        (unclipped, unclipped, false)
    } else {
        (clipped, 0.0, true)
    };
    let x = (t.ref_logprob - live).exp();
    let kl = x - (t.ref_logprob - live) - 1.0;
    TokenTerm {
        value: surrogate - cfg.kl_coeff * kl,
        kl,
        clipped: is_clipped,
        dlogp: d_surrogate - cfg.kl_coeff * (1.0 - x),
    }
}

/// Visits every unmasked token with its term and the weight that turns the
/// term into a loss contribution.
fn walk(
    batch: &GroupBatch,
    policy: &ToySoftmaxPolicy,
    cfg: &GrpoConfig,
    mut visit: impl FnMut(&BatchToken, &TokenTerm, f64),
) -> Result<(), GrpoError> {
    batch.check(policy)?;
    let n = batch.rollouts.len() as f64;
    for r in &batch.rollouts {
        let len = r.unmasked().count();
        if len == 0 {
            continue;
        }
        let weight = 1.0 / (n * len as f64);
        for t in r.unmasked() {
            let live = policy.logprob(t.context, t.allowed, t.symbol);
            visit(t, &token_term(live, t, r.advantage, cfg), weight);
        }
    }
    Ok(())
}

/// Loss `-J`, with stats for the batch (`step` is left at 0 and
/// `grad_norm` is not computed here).
pub fn surrogate_loss(
    batch: &GroupBatch,
    policy: &ToySoftmaxPolicy,
    cfg: &GrpoConfig,
) -> Result<(f64, TrainStats), GrpoError> {
    let mut loss = 0.0;
    let mut kl = 0.0;
    let (mut clipped, mut counted) = (0usize, 0usize);
    walk(batch, policy, cfg, |_, term, w| {
        loss -= w * term.value;
        kl += w * term.kl;
        clipped += term.clipped as usize;
        counted += 1;
    })?;
    let stats = TrainStats {
        step: 0,
        mean_reward: batch.rollouts.iter().map(|r| r.reward).sum::<f64>() / batch.rollouts.len() as f64,
        mean_kl: kl,
        clip_fraction: if counted == 0 {
            0.0
        } else {
            clipped as f64 / counted as f64
        },
        grad_norm: 0.0,
    };
    Ok((loss, stats))
}

/// Gradient of [`surrogate_loss`] with respect to the logits table.
pub fn gradient(batch: &GroupBatch, policy: &ToySoftmaxPolicy, cfg: &GrpoConfig) -> Result<Vec<f64>, GrpoError> {
    let a = policy.alphabet_size();
    let mut grad = vec![0.0; policy.n_params()];
    walk(batch, policy, cfg, |t, term, w| {
        let coeff = -w * term.dlogp;
        if coeff == 0.0 {
            return;
        }
        let row = policy.logprob_row_gradient(t.context, t.allowed, t.symbol);
        let base = t.context as usize * a;
        for (g, d) in grad[base..base + a].iter_mut().zip(row) {
            *g += coeff * d;
        }
    })?;
    Ok(grad)
}

/// Everything [`train`] needs besides the policy.
#[derive(Debug, Clone, Copy)]
pub struct TrainSetup<'a> {
    pub train: &'a [QaExample],
    pub index: &'a RetrievalIndex,
    pub rollout: RolloutConfig,
    pub retrieval: RetrievalConfig,
    pub reward: RewardMode,
    pub grpo: GrpoConfig,
}

/// Plain gradient ascent on `J`. Each step snapshots the sampling policy,
/// draws `questions_per_step` questions, samples one group per question with
/// the [`ToySearchAgent`], scores it and applies one update. The reference
/// policy is the policy as passed in.
pub fn train(
    mut policy: ToySoftmaxPolicy,
    setup: &TrainSetup<'_>,
    seed: u64,
    mut on_step: impl FnMut(&TrainStats),
) -> Result<(ToySoftmaxPolicy, Vec<TrainStats>), GrpoError> {
    let cfg = &setup.grpo;
    cfg.validate()?;
    if setup.train.is_empty() {
        return Err(GrpoError::EmptyDataset);
    }
    ToySearchAgent::new(&policy).map_err(RolloutError::from)?;
    let rollout_cfg = RolloutConfig {
        group_size: cfg.group_size,
        ..setup.rollout
    };
    let reference: FrozenPolicy = policy.snapshot();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all_stats = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let old = policy.snapshot();
        let agent = ToySearchAgent::new(&old).map_err(RolloutError::from)?;
        let mut batch = GroupBatch::default();
        for q in setup.train.choose_multiple(&mut rng, cfg.questions_per_step) {
            let group_seed: u64 = rng.gen();
            let records = run_group(&agent, setup.index, q, &rollout_cfg, &setup.retrieval, group_seed)?;
            let rewards: Vec<f64> = records
                .iter()
                .map(|r| score_trajectory(&r.trajectory, &r.retrieved, q, &setup.reward).r_overall)
                .collect();
            batch.extend(GroupBatch::from_group(&records, &rewards, &reference, cfg.std_epsilon)?);
        }
        let (_, mut stats) = surrogate_loss(&batch, &policy, cfg)?;
        let grad = gradient(&batch, &policy, cfg)?;
        stats.step = step;
        stats.grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        for (p, g) in policy.params_mut().iter_mut().zip(&grad) {
            *p -= cfg.learning_rate * g;
        }
        debug!(step, reward = stats.mean_reward, kl = stats.mean_kl, "grpo step");
        on_step(&stats);
        all_stats.push(stats);
    }
    Ok((policy, all_stats))
}
