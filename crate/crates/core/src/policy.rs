//! Finite, exactly normalized response distributions.
//!
//! A response is a sequence of `L` tokens from a vocabulary of size `V`,
//! enumerated in base-`V` lexicographic order (first token most significant).
//! Two parameterizations are provided:
//!
//! * [`PolicyKind::Tabular`]: one free logit per (prompt, sequence). Any
//!   full-support distribution is representable.
//! * [`PolicyKind::Factorized`]: per-position logits that ignore the prefix,
//!   `π(y|x) = ∏ₖ softmax(logits[x,k])[yₖ]`. Capacity-limited on purpose.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BpoError, Result};
use crate::math::{log_softmax_in_place, log_sum_exp};
use crate::SCHEMA_VERSION;

/// Largest number of sequences per prompt that may be enumerated.
pub const ENUMERATION_LIMIT: u128 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Tabular,
    Factorized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub prompts: usize,
    pub vocab: usize,
    pub length: usize,
    pub kind: PolicyKind,
}

impl PolicySpec {
    pub fn new(prompts: usize, vocab: usize, length: usize, kind: PolicyKind) -> Result<Self> {
        let spec = PolicySpec {
            prompts,
            vocab,
            length,
            kind,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts == 0 || self.vocab == 0 || self.length == 0 {
            return Err(BpoError::InvalidSpec(format!(
                "prompts, vocab and length must be positive: {self:?}"
            )));
        }
        let size = (self.vocab as u128)
            .checked_pow(self.length as u32)
            .unwrap_or(u128::MAX);
        if size > ENUMERATION_LIMIT {
            return Err(BpoError::Guard {
                size,
                limit: ENUMERATION_LIMIT,
            });
        }
        Ok(())
    }

    /// `V^L`.
    pub fn num_sequences(&self) -> usize {
        self.vocab.pow(self.length as u32)
    }

    pub fn num_params(&self) -> usize {
        match self.kind {
            PolicyKind::Tabular => self.prompts * self.num_sequences(),
            PolicyKind::Factorized => self.prompts * self.length * self.vocab,
        }
    }

    /// Same shape (P, V, L), possibly different kind.
    pub fn same_shape(&self, other: &PolicySpec) -> bool {
        self.prompts == other.prompts && self.vocab == other.vocab && self.length == other.length
    }

    pub fn with_kind(&self, kind: PolicyKind) -> Self {
        PolicySpec { kind, ..*self }
    }

    pub fn tokens(&self, y: usize) -> Vec<usize> {
        let mut out = vec![0; self.length];
        let mut rest = y;
        for k in (0..self.length).rev() {
            out[k] = rest % self.vocab;
            rest /= self.vocab;
        }
        out
    }

    pub fn sequence_index(&self, tokens: &[usize]) -> usize {
        tokens.iter().fold(0, |acc, &t| acc * self.vocab + t)
    }

    pub(crate) fn check_prompt(&self, x: usize) -> Result<()> {
        if x < self.prompts {
            Ok(())
        } else {
            Err(BpoError::Index {
                what: "prompt",
                index: x,
                limit: self.prompts,
            })
        }
    }

    pub(crate) fn check_sequence(&self, y: usize) -> Result<()> {
        let n = self.num_sequences();
        if y < n {
            Ok(())
        } else {
            Err(BpoError::Index {
                what: "sequence",
                index: y,
                limit: n,
            })
        }
    }
}

/// A policy: a [`PolicySpec`] plus its flat logit vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    spec: PolicySpec,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyDocument {
    schema_version: u32,
    spec: PolicySpec,
    params: Vec<f64>,
}

impl Policy {
    /// Uniform policy (all logits zero).
    pub fn uniform(spec: PolicySpec) -> Result<Self> {
        spec.validate()?;
        Ok(Policy {
            spec,
            params: vec![0.0; spec.num_params()],
        })
    }

    pub fn from_params(spec: PolicySpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.num_params() {
            return Err(BpoError::Shape(format!(
                "expected {} parameters, got {}",
                spec.num_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(BpoError::NonFinite("policy parameters".into()));
        }
        Ok(Policy { spec, params })
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Log-probabilities of every sequence for prompt `x`.
    pub fn log_probs(&self, x: usize) -> Result<Vec<f64>> {
        self.spec.check_prompt(x)?;
        Ok(self.log_probs_unchecked(x))
    }

    pub(crate) fn log_probs_unchecked(&self, x: usize) -> Vec<f64> {
        let n = self.spec.num_sequences();
        match self.spec.kind {
            PolicyKind::Tabular => {
                let mut block = self.params[x * n..(x + 1) * n].to_vec();
                log_softmax_in_place(&mut block);
                block
            }
            PolicyKind::Factorized => {
                let tables = self.position_log_softmax(x);
                let (v, l) = (self.spec.vocab, self.spec.length);
                (0..n)
                    .map(|y| {
                        let mut rest = y;
                        let mut acc = 0.0;
                        for k in (0..l).rev() {
                            acc += tables[k * v + rest % v];
                            rest /= v;
                        }
                        acc
                    })
                    .collect()
            }
        }
    }

    /// Flattened `L × V` per-position log-softmax tables (factorized only).
    fn position_log_softmax(&self, x: usize) -> Vec<f64> {
        let (v, l) = (self.spec.vocab, self.spec.length);
        let mut tables = self.params[x * l * v..(x + 1) * l * v].to_vec();
        for k in 0..l {
            log_softmax_in_place(&mut tables[k * v..(k + 1) * v]);
        }
        tables
    }

    pub fn probs(&self, x: usize) -> Result<Vec<f64>> {
        Ok(self.log_probs(x)?.into_iter().map(f64::exp).collect())
    }

    pub fn log_prob(&self, x: usize, y: usize) -> Result<f64> {
        self.spec.check_prompt(x)?;
        self.spec.check_sequence(y)?;
        let n = self.spec.num_sequences();
        Ok(match self.spec.kind {
            PolicyKind::Tabular => {
                let block = &self.params[x * n..(x + 1) * n];
                block[y] - log_sum_exp(block)
            }
            PolicyKind::Factorized => {
                let v = self.spec.vocab;
                let base = x * self.spec.length * v;
                self.spec
                    .tokens(y)
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| {
                        let row = &self.params[base + k * v..base + (k + 1) * v];
                        row[t] - log_sum_exp(row)
                    })
                    .sum()
            }
        })
    }

    /// Gradient of `log π(y|x)` with respect to the flat parameter vector.
    pub fn grad_log_prob(&self, x: usize, y: usize) -> Result<Vec<f64>> {
        self.spec.check_prompt(x)?;
        self.spec.check_sequence(y)?;
        let mut coeffs = vec![0.0; self.spec.num_sequences()];
        coeffs[y] = 1.0;
        let mut out = vec![0.0; self.params.len()];
        self.accumulate_grad(x, &coeffs, &mut out);
        Ok(out)
    }

    /// `out += Σ_y coeffs[y]·∇ log π(y|x)` for a single prompt.
    ///
    /// `coeffs` has one entry per sequence; `out` is the full parameter vector.
    pub fn accumulate_grad(&self, x: usize, coeffs: &[f64], out: &mut [f64]) {
        let n = self.spec.num_sequences();
        debug_assert_eq!(coeffs.len(), n);
        debug_assert_eq!(out.len(), self.params.len());
        let total: f64 = coeffs.iter().sum();
        match self.spec.kind {
            PolicyKind::Tabular => {
                let lp = self.log_probs_unchecked(x);
                let block = &mut out[x * n..(x + 1) * n];
                for ((o, c), l) in block.iter_mut().zip(coeffs).zip(&lp) {
                    *o += c - total * l.exp();
                }
            }
            PolicyKind::Factorized => {
                let (v, l) = (self.spec.vocab, self.spec.length);
                let tables = self.position_log_softmax(x);
                let block = &mut out[x * l * v..(x + 1) * l * v];
                for (y, &c) in coeffs.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    let mut rest = y;
                    for k in (0..l).rev() {
                        block[k * v + rest % v] += c;
                        rest /= v;
                    }
                }
                for (o, t) in block.iter_mut().zip(&tables) {
                    *o -= total * t.exp();
                }
            }
        }
    }

    /// Shannon entropy (nats) of the response distribution for prompt `x`.
    pub fn entropy(&self, x: usize) -> Result<f64> {
        let lp = self.log_probs(x)?;
        Ok(-lp.iter().map(|l| l.exp() * l).sum::<f64>())
    }

    /// Draw a sequence index for prompt `x`; deterministic in `seed`.
    pub fn sample(&self, x: usize, seed: u64) -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(x, &mut rng)
    }

    pub fn sample_with<R: rand::Rng + ?Sized>(&self, x: usize, rng: &mut R) -> Result<usize> {
        let probs = self.probs(x)?;
        let dist = WeightedIndex::new(&probs)
            .map_err(|e| BpoError::NonFinite(format!("sampling weights: {e}")))?;
        Ok(dist.sample(rng))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&PolicyDocument {
            schema_version: SCHEMA_VERSION,
            spec: self.spec,
            params: self.params.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: PolicyDocument = serde_json::from_str(s)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(BpoError::Serde(format!(
                "unsupported schema_version {}",
                doc.schema_version
            )));
        }
        Policy::from_params(doc.spec, doc.params)
    }
}

/// Exact `KL(p(·|x) ‖ q(·|x))` by enumeration.
pub fn kl_divergence(p: &Policy, q: &Policy, x: usize) -> Result<f64> {
    if !p.spec.same_shape(&q.spec) {
        return Err(BpoError::Shape(format!("{:?} vs {:?}", p.spec, q.spec)));
    }
    let (lp, lq) = (p.log_probs(x)?, q.log_probs(x)?);
    Ok(kl_from_log_probs(&lp, &lq))
}

pub(crate) fn kl_from_log_probs(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum::<f64>()
        .max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(kind: PolicyKind) -> PolicySpec {
        PolicySpec::new(2, 3, 2, kind).unwrap()
    }

    fn random_policy(kind: PolicyKind, seed: u64) -> Policy {
        use rand::Rng;
        let s = spec(kind);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..s.num_params()).map(|_| rng.random_range(-2.0..2.0)).collect();
        Policy::from_params(s, params).unwrap()
    }

    #[test]
    fn guard() {
        assert!(matches!(
            PolicySpec::new(1, 16, 4, PolicyKind::Tabular),
            Err(BpoError::Guard { size: 65536, .. })
        ));
        assert!(PolicySpec::new(1, 4, 6, PolicyKind::Tabular).is_ok());
        assert!(PolicySpec::new(0, 4, 2, PolicyKind::Tabular).is_err());
    }

    #[test]
    fn token_indexing_is_a_bijection() {
        let s = PolicySpec::new(1, 3, 3, PolicyKind::Tabular).unwrap();
        for y in 0..s.num_sequences() {
            assert_eq!(s.sequence_index(&s.tokens(y)), y);
        }
        assert_eq!(s.tokens(5), vec![0, 1, 2]);
    }

    #[test]
    fn uniform_log_probs() {
        for kind in [PolicyKind::Tabular, PolicyKind::Factorized] {
            let p = Policy::uniform(spec(kind)).unwrap();
            let expect = -2.0 * 3f64.ln();
            for y in 0..9 {
                assert!((p.log_prob(1, y).unwrap() - expect).abs() < 1e-15);
            }
            assert!((p.entropy(0).unwrap() - 2.0 * 3f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn log_prob_agrees_with_log_probs() {
        for kind in [PolicyKind::Tabular, PolicyKind::Factorized] {
            let p = random_policy(kind, 3);
            let all = p.log_probs(1).unwrap();
            for (y, l) in all.iter().enumerate() {
                assert!((p.log_prob(1, y).unwrap() - l).abs() < 1e-14);
            }
            let total: f64 = all.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn index_errors() {
        let p = Policy::uniform(spec(PolicyKind::Tabular)).unwrap();
        assert!(matches!(p.log_prob(2, 0), Err(BpoError::Index { .. })));
        assert!(matches!(p.log_prob(0, 9), Err(BpoError::Index { .. })));
        assert!(p.grad_log_prob(5, 0).is_err());
        assert!(p.entropy(7).is_err());
    }

    #[test]
    fn uniform_tabular_gradient() {
        let s = PolicySpec::new(2, 2, 2, PolicyKind::Tabular).unwrap();
        let p = Policy::uniform(s).unwrap();
        let g = p.grad_log_prob(1, 2).unwrap();
        assert_eq!(&g[..4], &[0.0; 4]);
        assert_eq!(&g[4..], &[-0.25, -0.25, 0.75, -0.25]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [PolicyKind::Tabular, PolicyKind::Factorized] {
            let p = random_policy(kind, 11);
            for (x, y) in [(0, 0), (1, 4), (1, 8)] {
                let g = p.grad_log_prob(x, y).unwrap();
                let mut sums = vec![0.0; p.params.len() / if kind == PolicyKind::Tabular { 9 } else { 3 }];
                for (i, gi) in g.iter().enumerate() {
                    let block = if kind == PolicyKind::Tabular { i / 9 } else { i / 3 };
                    sums[block] += gi;
                    let eps = 1e-6;
                    let mut up = p.clone();
                    up.params[i] += eps;
                    let mut dn = p.clone();
                    dn.params[i] -= eps;
                    let fd = (up.log_prob(x, y).unwrap() - dn.log_prob(x, y).unwrap()) / (2.0 * eps);
                    assert!((gi - fd).abs() <= 1e-6 * gi.abs().max(fd.abs()) + 1e-9, "{kind:?} {i}: {gi} vs {fd}");
                }
                for s in sums {
                    assert!(s.abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn near_point_mass_entropy() {
        let s = PolicySpec::new(1, 2, 2, PolicyKind::Tabular).unwrap();
        let p = Policy::from_params(s, vec![50.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(p.entropy(0).unwrap() < 1e-10);
        for seed in 0..20 {
            assert_eq!(p.sample(0, seed).unwrap(), 0);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_calibrated() {
        let p = random_policy(PolicyKind::Factorized, 5);
        assert_eq!(p.sample(1, 42).unwrap(), p.sample(1, 42).unwrap());
        let probs = p.probs(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut counts = vec![0usize; probs.len()];
        for _ in 0..n {
            counts[p.sample_with(1, &mut rng).unwrap()] += 1;
        }
        for (c, pr) in counts.iter().zip(&probs) {
            let sigma = (pr * (1.0 - pr) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - pr).abs() <= 3.0 * sigma + 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        let s = PolicySpec::new(1, 2, 1, PolicyKind::Tabular).unwrap();
        let p = Policy::from_params(s, vec![3f64.ln(), 0.0]).unwrap();
        let q = Policy::uniform(s).unwrap();
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl_divergence(&p, &q, 0).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.130812).abs() < 1e-6);
        assert_eq!(kl_divergence(&p, &p, 0).unwrap(), 0.0);

        let peaked = Policy::from_params(s, vec![20.0, 0.0]).unwrap();
        assert!(kl_divergence(&q, &peaked, 0).unwrap() > 5.0);

        let other = Policy::uniform(PolicySpec::new(1, 3, 1, PolicyKind::Tabular).unwrap()).unwrap();
        assert!(matches!(kl_divergence(&p, &other, 0), Err(BpoError::Shape(_))));
    }

    #[test]
    fn factorized_is_representable_as_tabular() {
        let f = random_policy(PolicyKind::Factorized, 8);
        let lp: Vec<f64> = (0..2).flat_map(|x| f.log_probs(x).unwrap()).collect();
        let t = Policy::from_params(spec(PolicyKind::Tabular), lp).unwrap();
        for x in 0..2 {
            assert!(kl_divergence(&f, &t, x).unwrap() < 1e-14);
        }
    }

    #[test]
    fn json_round_trip() {
        let p = random_policy(PolicyKind::Tabular, 1);
        let back = Policy::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);
        assert!(Policy::from_json(r#"{"schema_version":99,"spec":{"prompts":1,"vocab":2,"length":1,"kind":"tabular"},"params":[0,0]}"#).is_err());
    }

    proptest! {
        #[test]
        fn normalized_with_full_support(params in proptest::collection::vec(-30.0f64..30.0, 2 * 3 * 2)) {
            let p = Policy::from_params(spec(PolicyKind::Factorized), params).unwrap();
            for x in 0..2 {
                let probs = p.probs(x).unwrap();
                prop_assert!(probs.iter().all(|&q| q > 0.0));
                prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(p.entropy(x).unwrap() <= 2.0 * 3f64.ln() + 1e-12);
            }
        }
    }
}
