//! Synthetic Bradley–Terry preference worlds.
//!
//! A [`Target`] fixes a reward table `r(x, y)`, a reference policy and the
//! regularization `β`. From it everything is known exactly:
//!
//! * `p(y_a ≻ y_b | x) = σ(r(x, y_a) − r(x, y_b))`,
//! * the data ratio `R_data = p(y_w ≺ y_l | x) / p(y_w ≻ y_l | x)`,
//! * the optimal policy `π*(y|x) ∝ π_ref(y|x)·exp(r(x, y)/β)`.
//!
//! Triples are produced by drawing a prompt, then an unordered pair of
//! distinct responses, then orienting the pair with the preference
//! probability.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{BpoError, Result};
use crate::math::{log_softmax_in_place, sigmoid};
use crate::policy::{Policy, PolicyKind, PolicySpec};
use crate::SCHEMA_VERSION;

/// Largest number of weighted triples [`Target::enumerate_exact`] will build.
pub const TRIPLE_LIMIT: u128 = 1 << 24;

/// Distribution over unordered pairs `{i, j}`, `i < j`, of distinct responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairDist {
    #[default]
    Uniform,
    /// Per-prompt weights over pairs in lexicographic `(i, j)` order; each row is normalized on use.
    Table { weights: Vec<Vec<f64>> },
}

/// Everything needed to regenerate a target deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetConfig {
    pub prompts: usize,
    pub vocab: usize,
    pub length: usize,
    pub kind: PolicyKind,
    pub beta: f64,
    pub reward_seed: u64,
    pub reference_seed: u64,
    /// Rewards are i.i.d. uniform on `[−reward_range, reward_range]`.
    pub reward_range: f64,
    /// Reference logits are i.i.d. normal with this standard deviation (0 = uniform reference).
    pub reference_scale: f64,
    /// `None` means uniform over prompts.
    pub prompt_dist: Option<Vec<f64>>,
    pub pair_dist: PairDist,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            prompts: 4,
            vocab: 4,
            length: 3,
            kind: PolicyKind::Tabular,
            beta: 0.1,
            reward_seed: 0,
            reference_seed: 1,
            reward_range: 0.5,
            reference_scale: 0.5,
            prompt_dist: None,
            pair_dist: PairDist::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub x: usize,
    pub y_w: usize,
    pub y_l: usize,
}

/// Preference triples; either sampled (unit weights) or an exact weighted enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleDataset {
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub records: Vec<Triple>,
    /// Present for exact enumerations; sums to 1.
    pub weights: Option<Vec<f64>>,
}

impl TripleDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn is_exact(&self) -> bool {
        self.weights.is_some()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: TripleDataset = serde_json::from_str(s)?;
        if d.schema_version != SCHEMA_VERSION {
            return Err(BpoError::Serde(format!("unsupported schema_version {}", d.schema_version)));
        }
        if d.records.iter().any(|t| t.y_w == t.y_l) {
            return Err(BpoError::InvalidSpec("dataset contains a record with y_w = y_l".into()));
        }
        if let Some(w) = &d.weights {
            if w.len() != d.records.len() {
                return Err(BpoError::Shape("weights and records differ in length".into()));
            }
        }
        Ok(d)
    }
}

/// A fully specified synthetic preference world.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    config: TargetConfig,
    reference: Policy,
    reward: Vec<f64>,
    prompt_dist: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TargetDocument {
    schema_version: u32,
    config: TargetConfig,
    reference_params: Vec<f64>,
    reward: Vec<f64>,
    prompt_dist: Vec<f64>,
}

impl Target {
    pub fn generate(config: &TargetConfig) -> Result<Self> {
        let spec = PolicySpec::new(config.prompts, config.vocab, config.length, config.kind)?;
        let n = spec.num_sequences();
        if !(config.reward_range.is_finite() && config.reward_range >= 0.0) {
            return Err(BpoError::InvalidSpec("reward_range must be finite and non-negative".into()));
        }
        if !(config.reference_scale.is_finite() && config.reference_scale >= 0.0) {
            return Err(BpoError::InvalidSpec("reference_scale must be finite and non-negative".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.reward_seed);
        let a = config.reward_range;
        let reward: Vec<f64> = (0..config.prompts * n)
            .map(|_| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(config.reference_seed);
        let params: Vec<f64> = if config.reference_scale > 0.0 {
            let normal = Normal::new(0.0, config.reference_scale)
                .map_err(|e| BpoError::InvalidSpec(e.to_string()))?;
            (0..spec.num_params()).map(|_| normal.sample(&mut rng)).collect()
        } else {
            vec![0.0; spec.num_params()]
        };
        let reference = Policy::from_params(spec, params)?;
        Target::from_parts(config.clone(), reference, reward)
    }

    /// Assemble a target from an explicit reference and reward table.
    pub fn from_parts(config: TargetConfig, reference: Policy, reward: Vec<f64>) -> Result<Self> {
        let spec = *reference.spec();
        if spec.prompts != config.prompts || spec.vocab != config.vocab || spec.length != config.length {
            return Err(BpoError::Shape("reference policy does not match the target shape".into()));
        }
        let n = spec.num_sequences();
        if n < 2 {
            return Err(BpoError::InvalidSpec("need at least two responses per prompt".into()));
        }
        if !(config.beta.is_finite() && config.beta > 0.0) {
            return Err(BpoError::InvalidSpec(format!("β must be positive, got {}", config.beta)));
        }
        if reward.len() != spec.prompts * n || reward.iter().any(|r| !r.is_finite()) {
            return Err(BpoError::Shape("reward table must be finite with P × V^L entries".into()));
        }
        let prompt_dist = match &config.prompt_dist {
            None => vec![1.0 / spec.prompts as f64; spec.prompts],
            Some(p) => normalize(p, spec.prompts, "prompt_dist")?,
        };
        if let PairDist::Table { weights } = &config.pair_dist {
            if weights.len() != spec.prompts {
                return Err(BpoError::Shape("pair_dist needs one row per prompt".into()));
            }
            for row in weights {
                normalize(row, n * (n - 1) / 2, "pair_dist")?;
                if row.iter().any(|&w| w <= 0.0) {
                    return Err(BpoError::InvalidSpec("pair_dist must give every pair positive mass".into()));
                }
            }
        }
        Ok(Target {
            config,
            reference,
            reward,
            prompt_dist,
        })
    }

    pub fn config(&self) -> &TargetConfig {
        &self.config
    }

    pub fn beta(&self) -> f64 {
        self.config.beta
    }

    pub fn spec(&self) -> &PolicySpec {
        self.reference.spec()
    }

    pub fn reference(&self) -> &Policy {
        &self.reference
    }

    pub fn prompt_dist(&self) -> &[f64] {
        &self.prompt_dist
    }

    pub fn num_sequences(&self) -> usize {
        self.spec().num_sequences()
    }

    pub fn reward(&self, x: usize, y: usize) -> f64 {
        self.reward[x * self.num_sequences() + y]
    }

    pub fn rewards(&self, x: usize) -> &[f64] {
        let n = self.num_sequences();
        &self.reward[x * n..(x + 1) * n]
    }

    fn check_pair(&self, x: usize, ya: usize, yb: usize) -> Result<()> {
        let spec = self.spec();
        spec.check_prompt(x)?;
        spec.check_sequence(ya)?;
        spec.check_sequence(yb)?;
        if ya == yb {
            return Err(BpoError::domain("preference", format!("responses must differ, got {ya} twice")));
        }
        Ok(())
    }

    /// `σ(r(x, y_a) − r(x, y_b))`.
    pub fn preference_prob(&self, x: usize, ya: usize, yb: usize) -> Result<f64> {
        self.check_pair(x, ya, yb)?;
        Ok(sigmoid(self.reward(x, ya) - self.reward(x, yb)))
    }

    /// `(1 − p)/p` with `p = p(y_w ≻ y_l | x)`.
    pub fn data_ratio(&self, x: usize, yw: usize, yl: usize) -> Result<f64> {
        self.check_pair(x, yw, yl)?;
        Ok((self.reward(x, yl) - self.reward(x, yw)).exp())
    }

    /// Tabular `π*` with `log π*(y|x) = log π_ref(y|x) + r(x,y)/β − log Z(x)`.
    pub fn build_optimal_policy(&self) -> Result<Policy> {
        let spec = self.spec().with_kind(PolicyKind::Tabular);
        let mut params = Vec::with_capacity(spec.num_params());
        for x in 0..spec.prompts {
            let mut block: Vec<f64> = self
                .reference
                .log_probs(x)?
                .iter()
                .zip(self.rewards(x))
                .map(|(lr, r)| lr + r / self.beta())
                .collect();
            log_softmax_in_place(&mut block);
            params.extend(block);
        }
        Policy::from_params(spec, params)
    }

    /// `π_ref(y_w|x)/π_ref(y_l|x) · (p/(1−p))^{1/β}`: the optimal sequence ratio from the reference and the preferences alone.
    pub fn optimal_ratio_rhs(&self, x: usize, yw: usize, yl: usize) -> Result<f64> {
        let p = self.preference_prob(x, yw, yl)?;
        let q = self.preference_prob(x, yl, yw)?;
        let lr_w = self.reference.log_prob(x, yw)?;
        let lr_l = self.reference.log_prob(x, yl)?;
        Ok((lr_w - lr_l + (p.ln() - q.ln()) / self.beta()).exp())
    }

    fn pair_weights(&self, x: usize) -> Option<Vec<f64>> {
        match &self.config.pair_dist {
            PairDist::Uniform => None,
            PairDist::Table { weights } => {
                let row = &weights[x];
                let total: f64 = row.iter().sum();
                Some(row.iter().map(|w| w / total).collect())
            }
        }
    }

    /// Draw `n` triples; deterministic in `seed`.
    pub fn sample_triples(&self, n: usize, seed: u64) -> Result<TripleDataset> {
        if n == 0 {
            return Err(BpoError::EmptyBatch);
        }
        let mut sampler = TripleSampler::new(self)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n).map(|_| sampler.draw(&mut rng)).collect();
        Ok(TripleDataset {
            schema_version: SCHEMA_VERSION,
            seed: Some(seed),
            records,
            weights: None,
        })
    }

    /// Every ordered triple with weight `p(x)·p(pair|x)·p(y_w ≻ y_l|x)`.
    pub fn enumerate_exact(&self) -> Result<TripleDataset> {
        let n = self.num_sequences();
        let p = self.spec().prompts;
        let size = (p as u128) * (n as u128) * (n as u128 - 1);
        if size > TRIPLE_LIMIT {
            return Err(BpoError::Guard {
                size,
                limit: TRIPLE_LIMIT,
            });
        }
        let uniform_pair = 1.0 / (n * (n - 1) / 2) as f64;
        let mut records = Vec::with_capacity(size as usize);
        let mut weights = Vec::with_capacity(size as usize);
        for x in 0..p {
            let pw = self.pair_weights(x);
            let mut k = 0;
            for i in 0..n {
                for j in i + 1..n {
                    let pair = pw.as_ref().map_or(uniform_pair, |w| w[k]);
                    k += 1;
                    let base = self.prompt_dist[x] * pair;
                    let p_ij = sigmoid(self.reward(x, i) - self.reward(x, j));
                    let p_ji = sigmoid(self.reward(x, j) - self.reward(x, i));
                    records.push(Triple { x, y_w: i, y_l: j });
                    weights.push(base * p_ij);
                    records.push(Triple { x, y_w: j, y_l: i });
                    weights.push(base * p_ji);
                }
            }
        }
        Ok(TripleDataset {
            schema_version: SCHEMA_VERSION,
            seed: None,
            records,
            weights: Some(weights),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TargetDocument {
            schema_version: SCHEMA_VERSION,
            config: self.config.clone(),
            reference_params: self.reference.params().to_vec(),
            reward: self.reward.clone(),
            prompt_dist: self.prompt_dist.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: TargetDocument = serde_json::from_str(s)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(BpoError::Serde(format!("unsupported schema_version {}", doc.schema_version)));
        }
        let c = &doc.config;
        let spec = PolicySpec::new(c.prompts, c.vocab, c.length, c.kind)?;
        let reference = Policy::from_params(spec, doc.reference_params)?;
        let t = Target::from_parts(doc.config, reference, doc.reward)?;
        if t.prompt_dist != doc.prompt_dist {
            return Err(BpoError::InvalidSpec("stored prompt_dist disagrees with config".into()));
        }
        Ok(t)
    }

    /// Same rewards and settings, reference drawn for a different policy kind.
    pub fn with_reference_kind(&self, kind: PolicyKind) -> Result<Target> {
        if kind == self.spec().kind {
            return Ok(self.clone());
        }
        let mut cfg = self.config.clone();
        cfg.kind = kind;
        let regenerated = Target::generate(&cfg)?;
        Target::from_parts(cfg, regenerated.reference, self.reward.clone())
    }
}

fn normalize(p: &[f64], len: usize, what: &str) -> Result<Vec<f64>> {
    if p.len() != len {
        return Err(BpoError::Shape(format!("{what} needs {len} entries, got {}", p.len())));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(BpoError::InvalidSpec(format!("{what} entries must be finite and non-negative")));
    }
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        return Err(BpoError::InvalidSpec(format!("{what} has zero total mass")));
    }
    Ok(p.iter().map(|v| v / total).collect())
}

/// Streaming triple sampler over a target; shares its draw order with [`Target::sample_triples`].
pub struct TripleSampler<'a> {
    target: &'a Target,
    prompts: WeightedIndex<f64>,
    pairs: Option<Vec<WeightedIndex<f64>>>,
    pair_list: Vec<(usize, usize)>,
}

impl<'a> TripleSampler<'a> {
    pub fn new(target: &'a Target) -> Result<Self> {
        let prompts = WeightedIndex::new(target.prompt_dist())
            .map_err(|e| BpoError::InvalidSpec(format!("prompt_dist: {e}")))?;
        let n = target.num_sequences();
        let (pairs, pair_list) = match &target.config.pair_dist {
            PairDist::Uniform => (None, Vec::new()),
            PairDist::Table { weights } => {
                let list = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
                let dists = weights
                    .iter()
                    .map(|row| WeightedIndex::new(row).map_err(|e| BpoError::InvalidSpec(format!("pair_dist: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                (Some(dists), list)
            }
        };
        Ok(TripleSampler {
            target,
            prompts,
            pairs,
            pair_list,
        })
    }

    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Triple {
        let x = self.prompts.sample(rng);
        let (a, b) = match &self.pairs {
            None => {
                let n = self.target.num_sequences();
                let a = rng.random_range(0..n);
                let mut b = rng.random_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                (a, b)
            }
            Some(d) => self.pair_list[d[x].sample(rng)],
        };
        let p = sigmoid(self.target.reward(x, a) - self.target.reward(x, b));
        if rng.random::<f64>() < p {
            Triple { x, y_w: a, y_l: b }
        } else {
            Triple { x, y_w: b, y_l: a }
        }
    }
}
