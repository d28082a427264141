//! Order-2 context categorical policy over a closed symbol alphabet.
//!
//! The logits table has one row per context `(s1, s2)` of the two most recent
//! symbols and one column per symbol; row `s1 * A + s2` for an alphabet of
//! size `A`. Log-probabilities are exact log-softmax values, optionally
//! restricted to an allowed subset of symbols (grammar-constrained decoding).

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{apply_stops, GenerationRequest, Policy, PolicyError, PolicySample, TokenContext};

pub const MAX_ALPHABET: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySoftmaxPolicy {
    alphabet: Vec<String>,
    logits: Vec<f64>,
}

/// Immutable shared copy of a policy, used as π_old and π_ref.
pub type FrozenPolicy = Arc<ToySoftmaxPolicy>;

impl ToySoftmaxPolicy {
    /// All-zero logits: the uniform policy in every context.
    pub fn uniform(alphabet: Vec<String>) -> Self {
        assert!(
            !alphabet.is_empty() && alphabet.len() <= MAX_ALPHABET,
            "alphabet size must be in 1..={MAX_ALPHABET}"
        );
        let a = alphabet.len();
        ToySoftmaxPolicy {
            alphabet,
            logits: vec![0.0; a * a * a],
        }
    }

    pub fn from_logits(alphabet: Vec<String>, logits: Vec<f64>) -> Result<Self, PolicyError> {
        let mut p = Self::uniform(alphabet);
        if logits.len() != p.logits.len() {
            return Err(PolicyError::InvalidRequest(format!(
                "expected {} logits, got {}",
                p.logits.len(),
                logits.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(PolicyError::InvalidRequest("logits must be finite".into()));
        }
        p.logits = logits;
        Ok(p)
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet.len()
    }

    pub fn n_contexts(&self) -> usize {
        self.alphabet.len() * self.alphabet.len()
    }

    pub fn n_params(&self) -> usize {
        self.logits.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.logits
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn full_mask(&self) -> u64 {
        if self.alphabet.len() == 64 {
            u64::MAX
        } else {
            (1u64 << self.alphabet.len()) - 1
        }
    }

    pub fn symbol_id(&self, symbol: &str) -> Result<u32, PolicyError> {
        self.alphabet
            .iter()
            .position(|s| s == symbol)
            .map(|i| i as u32)
            .ok_or_else(|| PolicyError::UnknownSymbol(symbol.to_string()))
    }

    pub fn context_id(&self, older: u32, newer: u32) -> u32 {
        older * self.alphabet.len() as u32 + newer
    }

    pub fn row(&self, context: u32) -> &[f64] {
        let a = self.alphabet.len();
        let start = context as usize * a;
        &self.logits[start..start + a]
    }

    pub fn row_mut(&mut self, context: u32) -> &mut [f64] {
        let a = self.alphabet.len();
        let start = context as usize * a;
        &mut self.logits[start..start + a]
    }

    /// Softmax of `row / temperature` over the allowed symbols; disallowed
    /// symbols get probability zero.
    pub fn probabilities(&self, context: u32, allowed: u64, temperature: f64) -> Vec<f64> {
        let row = self.row(context);
        let max = row
            .iter()
            .enumerate()
            .filter(|(i, _)| allowed >> i & 1 == 1)
            .map(|(_, &x)| x / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                if allowed >> i & 1 == 1 {
                    (x / temperature - max).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= z);
        p
    }

    /// Exact log-probability of `symbol` in `context` under the allowed set.
    pub fn logprob(&self, context: u32, allowed: u64, symbol: u32) -> f64 {
        debug_assert!(allowed >> symbol & 1 == 1, "symbol outside allowed set");
        let row = self.row(context);
        let max = row
            .iter()
            .enumerate()
            .filter(|(i, _)| allowed >> i & 1 == 1)
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + row
                .iter()
                .enumerate()
                .filter(|(i, _)| allowed >> i & 1 == 1)
                .map(|(_, &x)| (x - max).exp())
                .sum::<f64>()
                .ln();
        row[symbol as usize] - lse
    }

    /// Log-probability of `token` after the last two symbols of `context`,
    /// over the whole alphabet. Missing history is padded with the first
    /// alphabet symbol.
    pub fn logprob_of(&self, context: &[&str], token: &str) -> Result<f64, PolicyError> {
        let ctx = self.context_from_symbols(context)?;
        let tok = self.symbol_id(token)?;
        Ok(self.logprob(ctx, self.full_mask(), tok))
    }

    pub fn context_from_symbols(&self, context: &[&str]) -> Result<u32, PolicyError> {
        let mut ids = [0u32; 2];
        let tail = &context[context.len().saturating_sub(2)..];
        let offset = 2 - tail.len();
        for (i, s) in tail.iter().enumerate() {
            ids[offset + i] = self.symbol_id(s)?;
        }
        Ok(self.context_id(ids[0], ids[1]))
    }

    /// Gradient of `logprob(context, allowed, symbol)` with respect to the
    /// logits row of `context`: one-hot minus the softmax, zero outside the
    /// allowed set.
    pub fn logprob_row_gradient(&self, context: u32, allowed: u64, symbol: u32) -> Vec<f64> {
        let mut g = self.probabilities(context, allowed, 1.0);
        g.iter_mut().for_each(|x| *x = -*x);
        g[symbol as usize] += 1.0;
        g
    }

    /// Draws a symbol. Temperature zero is argmax with ties to the lowest id.
    pub fn sample(&self, context: u32, allowed: u64, temperature: f64, rng: &mut dyn RngCore) -> u32 {
        if temperature == 0.0 {
            let row = self.row(context);
            let mut best: Option<(usize, f64)> = None;
            for (i, &x) in row.iter().enumerate() {
                if allowed >> i & 1 == 1 && best.is_none_or(|(_, b)| x > b) {
                    best = Some((i, x));
                }
            }
            return best.expect("empty allowed set").0 as u32;
        }
        let p = self.probabilities(context, allowed, temperature);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &pi) in p.iter().enumerate() {
            if pi > 0.0 {
                acc += pi;
                last = i;
                if u < acc {
                    return i as u32;
                }
            }
        }
        last as u32
    }

    pub fn snapshot(&self) -> FrozenPolicy {
        Arc::new(self.clone())
    }
}

/// Free-running symbol generation: symbols are joined by single spaces and
/// the context starts from two copies of the first alphabet symbol.
impl Policy for ToySoftmaxPolicy {
    fn generate(&self, req: &GenerationRequest, rng: &mut dyn RngCore) -> Result<PolicySample, PolicyError> {
        req.validate()?;
        let mask = self.full_mask();
        let (mut older, mut newer) = (0u32, 0u32);
        let mut sample = PolicySample {
            logprobs: Some(Vec::new()),
            token_contexts: Some(Vec::new()),
            ..Default::default()
        };
        for _ in 0..req.max_new_tokens {
            let ctx = self.context_id(older, newer);
            let sym = self.sample(ctx, mask, req.temperature, rng);
            sample.tokens.push(sym);
            sample.logprobs.as_mut().unwrap().push(self.logprob(ctx, mask, sym));
            sample.token_contexts.as_mut().unwrap().push(TokenContext {
                context: ctx,
                allowed: mask,
            });
            if !sample.text.is_empty() {
                sample.text.push(' ');
            }
            sample.text.push_str(&self.alphabet[sym as usize]);
            let (kept, stop) = apply_stops(&sample.text, &req.stop_sequences, req.max_new_tokens);
            if stop.is_some() {
                sample.text = kept.to_string();
                sample.stop_hit = stop;
                break;
            }
            older = newer;
            newer = sym;
        }
        Ok(sample)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn alphabet(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn two_symbol_logprobs() {
        let p = ToySoftmaxPolicy::uniform(alphabet(2));
        assert!((p.logprob_of(&["s0"], "s1").unwrap() + 2f64.ln()).abs() < 1e-15);

        let mut p = ToySoftmaxPolicy::uniform(alphabet(2));
        let ctx = p.context_from_symbols(&["s0", "s1"]).unwrap();
        p.row_mut(ctx).copy_from_slice(&[1.0, 0.0]);
        let expected = 1.0 - (1f64.exp() + 1.0).ln();
        assert!((p.logprob_of(&["s0", "s1"], "s0").unwrap() - expected).abs() < 1e-15);
        assert!(matches!(p.logprob_of(&[], "nope"), Err(PolicyError::UnknownSymbol(_))));
    }

    #[test]
    fn normalization_every_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ToySoftmaxPolicy::uniform(alphabet(5));
        p.params_mut().iter_mut().for_each(|x| *x = rng.gen_range(-30.0..30.0));
        for ctx in 0..p.n_contexts() as u32 {
            let total: f64 = (0..5).map(|s| p.logprob(ctx, p.full_mask(), s).exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
            let masked: f64 = [1u32, 3].iter().map(|&s| p.logprob(ctx, 0b01010, s).exp()).sum();
            assert!((masked - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn row_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ToySoftmaxPolicy::uniform(alphabet(4));
        p.params_mut().iter_mut().for_each(|x| *x = rng.gen_range(-2.0..2.0));
        let (ctx, mask, sym) = (5u32, 0b1011u64, 3u32);
        let g = p.logprob_row_gradient(ctx, mask, sym);
        let h = 1e-6;
        for j in 0..4 {
            let mut q = p.clone();
            q.row_mut(ctx)[j] += h;
            let up = q.logprob(ctx, mask, sym);
            q.row_mut(ctx)[j] -= 2.0 * h;
            let down = q.logprob(ctx, mask, sym);
            assert!((g[j] - (up - down) / (2.0 * h)).abs() < 1e-8, "j={j}");
        }
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn uniform_generation_logprob() {
        let p = ToySoftmaxPolicy::uniform(alphabet(7));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let req = super::super::tests::request("", &[], 20);
        let s = p.generate(&req, &mut rng).unwrap();
        assert_eq!(s.tokens.len(), 20);
        for lp in s.logprobs.unwrap() {
            assert!((lp + 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let mut p = ToySoftmaxPolicy::uniform(alphabet(3));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        p.params_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        let mut req = super::super::tests::request("", &[], 10);
        req.temperature = 0.0;
        let a = p.generate(&req, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = p.generate(&req, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
        for (t, c) in a.tokens.iter().zip(a.token_contexts.unwrap()) {
            let row = p.row(c.context);
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(row[*t as usize], best);
        }
    }

    #[test]
    fn generation_stops_at_stop_sequence() {
        let p = ToySoftmaxPolicy::uniform(alphabet(3));
        let req = super::super::tests::request("", &["s2"], 50);
        let s = p.generate(&req, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(s.stop_hit.as_deref(), Some("s2"));
        assert!(s.text.ends_with("s2"));
        assert_eq!(s.text.matches("s2").count(), 1);
    }

    #[test]
    fn snapshot_is_independent() {
        let mut p = ToySoftmaxPolicy::uniform(alphabet(3));
        let snap = p.snapshot();
        let before = snap.logprob(0, snap.full_mask(), 1);
        p.row_mut(0)[1] = 5.0;
        assert_eq!(snap.logprob(0, snap.full_mask(), 1), before);
        assert_eq!(*snap.snapshot(), *snap);
        let fresh = p.snapshot();
        for ctx in 0..p.n_contexts() as u32 {
            for s in 0..3 {
                assert_eq!(p.logprob(ctx, 7, s) - fresh.logprob(ctx, 7, s), 0.0);
            }
        }
    }
}
