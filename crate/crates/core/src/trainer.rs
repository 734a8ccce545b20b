//! Ratio-matching preference training on toy policies.
//!
//! Each triple contributes `h′(R)·R − h(R) − h′(1/R)` with `R = R_θ` clipped
//! to `[clip_lo, clip_hi]`. Its parameter gradient is `G_h(R)·∇_θ R`, with
//! `∇_θ R = R·(∂ log R/∂ lp_w · ∇ lp_w + ∂ log R/∂ lp_l · ∇ lp_l)`. Outside the
//! clip interval the loss is frozen at the boundary and the gradient is zero.
//!
//! Two expectation modes are supported: `exact` (the full weighted
//! enumeration of triples, i.e. full-batch gradient descent on the true
//! objective) and `sampled` (`batch_size` fresh draws per step).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergence::{Generator, HSpec};
use crate::error::{BpoError, Result};
use crate::math::weighted_mean_std;
use crate::metrics::{self, MetricSnapshot};
use crate::model_ratio::{RatioSpec, TripleLogProbs};
use crate::policy::Policy;
use crate::preference::{Target, Triple, TripleDataset, TripleSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    /// Per-parameter RMS scaling (RMSprop).
    AdaptiveRms { decay: f64, epsilon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub h: HSpec,
    pub ratio: RatioSpec,
    pub clip_lo: Option<f64>,
    pub clip_hi: Option<f64>,
    pub step_size: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub mode: Mode,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Stop early once the batch gradient norm drops to this value.
    #[serde(default)]
    pub stop_grad_norm: Option<f64>,
}

impl TrainConfig {
    pub fn new(h: HSpec, ratio: RatioSpec) -> Self {
        TrainConfig {
            h,
            ratio,
            clip_lo: None,
            clip_hi: None,
            step_size: 1.0,
            batch_size: 64,
            steps: 100,
            mode: Mode::Exact,
            seed: 0,
            optimizer: Optimizer::GradientDescent,
            stop_grad_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.h.validate()?;
        self.ratio.validate()?;
        for c in [self.clip_lo, self.clip_hi].into_iter().flatten() {
            if !(c.is_finite() && c > 0.0) {
                return Err(BpoError::InvalidSpec(format!("clip bounds must be positive, got {c}")));
            }
        }
        if let (Some(lo), Some(hi)) = (self.clip_lo, self.clip_hi) {
            if lo >= hi {
                return Err(BpoError::InvalidSpec(format!("clip_lo {lo} must be below clip_hi {hi}")));
            }
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(BpoError::InvalidSpec(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.steps == 0 {
            return Err(BpoError::InvalidSpec("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(BpoError::InvalidSpec("batch size must be positive".into()));
        }
        if let Optimizer::AdaptiveRms { decay, epsilon } = self.optimizer {
            if !(0.0..1.0).contains(&decay) || !(epsilon > 0.0) {
                return Err(BpoError::InvalidSpec("adaptive-rms needs decay in [0,1) and epsilon > 0".into()));
            }
        }
        Ok(())
    }

    /// Same configuration without ratio clipping.
    pub fn unclipped(&self) -> Self {
        TrainConfig {
            clip_lo: None,
            clip_hi: None,
            ..self.clone()
        }
    }

    fn clip(&self, r: f64) -> (f64, bool) {
        if let Some(lo) = self.clip_lo {
            if r < lo {
                return (lo, false);
            }
        }
        if let Some(hi) = self.clip_hi {
            if r > hi {
                return (hi, false);
            }
        }
        (r, true)
    }
}

/// Per-triple quantities shared by the loss and the gradient.
#[derive(Debug, Clone, Copy)]
struct TripleTerms {
    log_ratio: f64,
    loss: f64,
    /// `∂ loss/∂ lp_w`, `∂ loss/∂ lp_l`.
    d_lp_w: f64,
    d_lp_l: f64,
}

fn triple_terms(cfg: &TrainConfig, t: &TripleLogProbs, triple: Triple) -> Result<TripleTerms> {
    let with_ctx = |e: BpoError| BpoError::NonFinite(format!("{e} at triple {triple:?}"));
    let log_ratio = cfg.ratio.log_ratio(t).map_err(with_ctx)?;
    let r = log_ratio.exp();
    let (rc, inside) = cfg.clip(r);
    if !(rc.is_finite() && rc > 0.0) {
        return Err(BpoError::NonFinite(format!("ratio {r} (log {log_ratio}) at triple {triple:?}")));
    }
    let loss = cfg.h.loss_integrand(rc);
    if !loss.is_finite() {
        return Err(BpoError::NonFinite(format!("loss at ratio {rc} for triple {triple:?}")));
    }
    let (d_lp_w, d_lp_l) = if inside {
        let (pw, pl) = cfg.ratio.log_ratio_partials(t).map_err(with_ctx)?;
        let dl_dlogr = cfg.h.grad_magnitude(rc) * rc;
        (dl_dlogr * pw, dl_dlogr * pl)
    } else {
        (0.0, 0.0)
    };
    if !(d_lp_w.is_finite() && d_lp_l.is_finite()) {
        return Err(BpoError::NonFinite(format!("gradient at triple {triple:?}")));
    }
    Ok(TripleTerms {
        log_ratio,
        loss,
        d_lp_w,
        d_lp_l,
    })
}

fn triple_log_probs(policy: &Policy, reference: &Policy, tr: Triple) -> Result<TripleLogProbs> {
    let len = policy.spec().length;
    Ok(TripleLogProbs {
        lp_w: policy.log_prob(tr.x, tr.y_w)?,
        lp_l: policy.log_prob(tr.x, tr.y_l)?,
        lr_w: reference.log_prob(tr.x, tr.y_w)?,
        lr_l: reference.log_prob(tr.x, tr.y_l)?,
        len_w: len,
        len_l: len,
    })
}

fn check_pair(policy: &Policy, reference: &Policy) -> Result<()> {
    if policy.spec().same_shape(reference.spec()) {
        Ok(())
    } else {
        Err(BpoError::Shape(format!("policy {:?} vs reference {:?}", policy.spec(), reference.spec())))
    }
}

/// Clipped loss of a single triple.
pub fn triple_loss(cfg: &TrainConfig, policy: &Policy, reference: &Policy, x: usize, y_w: usize, y_l: usize) -> Result<f64> {
    check_pair(policy, reference)?;
    let tr = Triple { x, y_w, y_l };
    Ok(triple_terms(cfg, &triple_log_probs(policy, reference, tr)?, tr)?.loss)
}

/// `log R_θ` of a single triple (unclipped).
pub fn triple_log_ratio(cfg: &TrainConfig, policy: &Policy, reference: &Policy, tr: Triple) -> Result<f64> {
    check_pair(policy, reference)?;
    cfg.ratio.log_ratio(&triple_log_probs(policy, reference, tr)?)
}

/// `G_h(R)·∇_θ R` for a single triple; zero when `R` is clipped.
pub fn triple_gradient(cfg: &TrainConfig, policy: &Policy, reference: &Policy, x: usize, y_w: usize, y_l: usize) -> Result<Vec<f64>> {
    check_pair(policy, reference)?;
    let tr = Triple { x, y_w, y_l };
    let terms = triple_terms(cfg, &triple_log_probs(policy, reference, tr)?, tr)?;
    let mut coeffs = vec![0.0; policy.spec().num_sequences()];
    coeffs[y_w] += terms.d_lp_w;
    coeffs[y_l] += terms.d_lp_l;
    let mut grad = vec![0.0; policy.params().len()];
    policy.accumulate_grad(x, &coeffs, &mut grad);
    Ok(grad)
}

/// `∇_θ R_θ` for a single triple, unclipped.
pub fn ratio_gradient(cfg: &TrainConfig, policy: &Policy, reference: &Policy, tr: Triple) -> Result<Vec<f64>> {
    check_pair(policy, reference)?;
    let t = triple_log_probs(policy, reference, tr)?;
    let r = cfg.ratio.log_ratio(&t)?.exp();
    let (pw, pl) = cfg.ratio.log_ratio_partials(&t)?;
    let mut coeffs = vec![0.0; policy.spec().num_sequences()];
    coeffs[tr.y_w] += r * pw;
    coeffs[tr.y_l] += r * pl;
    let mut grad = vec![0.0; policy.params().len()];
    policy.accumulate_grad(tr.x, &coeffs, &mut grad);
    Ok(grad)
}

/// Weighted loss, gradient and reward-margin statistics over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub margin_mean: f64,
    pub margin_std: f64,
}

impl BatchEval {
    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Evaluate the batch loss and its exact gradient. `weights = None` means unit weights.
pub fn batch_eval(cfg: &TrainConfig, policy: &Policy, reference: &Policy, records: &[Triple], weights: Option<&[f64]>) -> Result<BatchEval> {
    check_pair(policy, reference)?;
    if records.is_empty() {
        return Err(BpoError::EmptyBatch);
    }
    let spec = policy.spec();
    let n = spec.num_sequences();
    let prompts = spec.prompts;
    let mut lp = Vec::with_capacity(prompts);
    let mut lr = Vec::with_capacity(prompts);
    for x in 0..prompts {
        lp.push(policy.log_probs(x)?);
        lr.push(reference.log_probs(x)?);
    }
    let mut coeffs = vec![vec![0.0; n]; prompts];
    let mut margins = Vec::with_capacity(records.len());
    let mut ws = Vec::with_capacity(records.len());
    let mut loss = 0.0;
    let mut total_w = 0.0;
    for (i, &tr) in records.iter().enumerate() {
        spec.check_prompt(tr.x)?;
        spec.check_sequence(tr.y_w)?;
        spec.check_sequence(tr.y_l)?;
        let w = weights.map_or(1.0, |w| w[i]);
        let t = TripleLogProbs {
            lp_w: lp[tr.x][tr.y_w],
            lp_l: lp[tr.x][tr.y_l],
            lr_w: lr[tr.x][tr.y_w],
            lr_l: lr[tr.x][tr.y_l],
            len_w: spec.length,
            len_l: spec.length,
        };
        let terms = triple_terms(cfg, &t, tr)?;
        loss += w * terms.loss;
        total_w += w;
        coeffs[tr.x][tr.y_w] += w * terms.d_lp_w;
        coeffs[tr.x][tr.y_l] += w * terms.d_lp_l;
        margins.push(-terms.log_ratio);
        ws.push(w);
    }
    if !(total_w > 0.0) {
        return Err(BpoError::EmptyBatch);
    }
    let mut grad = vec![0.0; policy.params().len()];
    for (x, c) in coeffs.iter_mut().enumerate() {
        c.iter_mut().for_each(|v| *v /= total_w);
        policy.accumulate_grad(x, c, &mut grad);
    }
    let (margin_mean, margin_std) = weighted_mean_std(&margins, &ws);
    Ok(BatchEval {
        loss: loss / total_w,
        grad,
        margin_mean,
        margin_std,
    })
}

/// Weighted mean of the clipped triple losses over a dataset.
pub fn batch_loss(cfg: &TrainConfig, policy: &Policy, reference: &Policy, data: &TripleDataset) -> Result<f64> {
    Ok(batch_eval(cfg, policy, reference, &data.records, data.weights.as_deref())?.loss)
}

/// Exact expected Bregman divergence `Σ w·B_h(R_data ‖ R_θ)` over the target's enumeration (no clipping).
pub fn bregman_objective_exact(cfg: &TrainConfig, policy: &Policy, target: &Target) -> Result<f64> {
    bregman_objective_on(cfg, policy, target, &target.enumerate_exact()?)
}

/// As [`bregman_objective_exact`] with a precomputed enumeration.
pub fn bregman_objective_on(cfg: &TrainConfig, policy: &Policy, target: &Target, exact: &TripleDataset) -> Result<f64> {
    let reference = target.reference();
    check_pair(policy, reference)?;
    let weights = exact
        .weights
        .as_ref()
        .ok_or_else(|| BpoError::InvalidSpec("the Bregman objective needs an exact (weighted) enumeration".into()))?;
    let spec = policy.spec();
    let mut lp = Vec::with_capacity(spec.prompts);
    let mut lr = Vec::with_capacity(spec.prompts);
    for x in 0..spec.prompts {
        lp.push(policy.log_probs(x)?);
        lr.push(reference.log_probs(x)?);
    }
    let mut total = 0.0;
    for (tr, w) in exact.records.iter().zip(weights) {
        let t = TripleLogProbs {
            lp_w: lp[tr.x][tr.y_w],
            lp_l: lp[tr.x][tr.y_l],
            lr_w: lr[tr.x][tr.y_w],
            lr_l: lr[tr.x][tr.y_l],
            len_w: spec.length,
            len_l: spec.length,
        };
        let r_model = cfg.ratio.log_ratio(&t)?.exp();
        let r_data = target.data_ratio(tr.x, tr.y_w, tr.y_l)?;
        total += w * cfg.h.bregman(r_data, r_model);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub margin_mean: f64,
    pub margin_std: f64,
    pub kl_to_target: f64,
    pub tv_to_target: f64,
    pub entropy_mean: f64,
    pub winrate_proxy: f64,
}

impl StepReport {
    fn new(step: usize, eval: &BatchEval, m: &MetricSnapshot) -> Self {
        StepReport {
            step,
            loss: eval.loss,
            grad_norm: eval.grad_norm(),
            margin_mean: eval.margin_mean,
            margin_std: eval.margin_std,
            kl_to_target: m.kl_to_target,
            tv_to_target: m.tv_to_target,
            entropy_mean: m.entropy_mean,
            winrate_proxy: m.winrate_proxy,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.loss,
            self.grad_norm,
            self.margin_mean,
            self.margin_std,
            self.kl_to_target,
            self.tv_to_target,
            self.entropy_mean,
            self.winrate_proxy,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// One report per step before its update, plus one for the final parameters.
    pub reports: Vec<StepReport>,
    pub policy: Policy,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Setup(#[from] BpoError),
    /// Training aborted on a non-finite loss or gradient.
    #[error("numeric failure at step {step}: {detail}")]
    Numeric {
        step: usize,
        detail: String,
        last_report: Option<StepReport>,
        reports: Vec<StepReport>,
    },
}

enum Batches<'a> {
    Full(&'a [Triple], Option<&'a [f64]>),
    FromTarget(TripleSampler<'a>),
    FromDataset(&'a TripleDataset),
}

/// Run ratio-matching training from `policy` (normally a copy of the reference).
///
/// Exact mode uses the full weighted enumeration of the target each step;
/// sampled mode draws `batch_size` triples per step from the target.
pub fn train(cfg: &TrainConfig, target: &Target, policy: Policy) -> std::result::Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    match cfg.mode {
        Mode::Exact => {
            let exact = target.enumerate_exact()?;
            run(cfg, target, policy, Batches::Full(&exact.records, exact.weights.as_deref()))
        }
        Mode::Sampled => run(cfg, target, policy, Batches::FromTarget(TripleSampler::new(target)?)),
    }
}

/// Train on a fixed dataset. Exact mode uses every record each step (with its
/// weights, if present); sampled mode draws `batch_size` records with replacement.
pub fn train_on_dataset(cfg: &TrainConfig, target: &Target, data: &TripleDataset, policy: Policy) -> std::result::Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(BpoError::EmptyBatch.into());
    }
    match cfg.mode {
        Mode::Exact => run(cfg, target, policy, Batches::Full(&data.records, data.weights.as_deref())),
        Mode::Sampled => run(cfg, target, policy, Batches::FromDataset(data)),
    }
}

fn run(cfg: &TrainConfig, target: &Target, mut policy: Policy, mut batches: Batches<'_>) -> std::result::Result<TrainOutcome, TrainError> {
    let reference = target.reference();
    check_pair(&policy, reference)?;
    let optimal = target.build_optimal_policy()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::with_capacity(cfg.steps + 1);
    let mut rms = vec![0.0; policy.params().len()];
    let mut scratch = Vec::new();

    for step in 0..=cfg.steps {
        let eval = match &mut batches {
            Batches::Full(records, weights) => batch_eval(cfg, &policy, reference, records, *weights),
            Batches::FromTarget(sampler) => {
                scratch.clear();
                scratch.extend((0..cfg.batch_size).map(|_| sampler.draw(&mut rng)));
                batch_eval(cfg, &policy, reference, &scratch, None)
            }
            Batches::FromDataset(data) => {
                scratch.clear();
                scratch.extend((0..cfg.batch_size).map(|_| data.records[rng.random_range(0..data.len())]));
                batch_eval(cfg, &policy, reference, &scratch, None)
            }
        };
        let eval = eval.map_err(|e| TrainError::Numeric {
            step,
            detail: e.to_string(),
            last_report: reports.last().cloned(),
            reports: reports.clone(),
        })?;
        let snap = metrics::snapshot(&policy, target, &optimal)?;
        let report = StepReport::new(step, &eval, &snap);
        if !report.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Numeric {
                step,
                detail: "non-finite loss, gradient or metric".into(),
                last_report: Some(report.clone()),
                reports: {
                    let mut r = reports;
                    r.push(report);
                    r
                },
            });
        }
        let converged = cfg.stop_grad_norm.is_some_and(|tol| report.grad_norm <= tol);
        reports.push(report);
        if step == cfg.steps || converged {
            break;
        }
        apply_update(cfg, &mut policy, &eval.grad, &mut rms);
    }
    Ok(TrainOutcome { reports, policy })
}

fn apply_update(cfg: &TrainConfig, policy: &mut Policy, grad: &[f64], rms: &mut [f64]) {
    let eta = cfg.step_size;
    match cfg.optimizer {
        Optimizer::GradientDescent => {
            for (p, g) in policy.params_mut().iter_mut().zip(grad) {
                *p -= eta * g;
            }
        }
        Optimizer::AdaptiveRms { decay, epsilon } => {
            for ((p, g), v) in policy.params_mut().iter_mut().zip(grad).zip(rms.iter_mut()) {
                *v = decay * *v + (1.0 - decay) * g * g;
                *p -= eta * g / (v.sqrt() + epsilon);
            }
        }
    }
}

/// Largest Hessian eigenvalue of the exact batch loss at `policy`, by power
/// iteration on finite-difference Hessian-vector products.
pub fn curvature_estimate(cfg: &TrainConfig, policy: &Policy, reference: &Policy, exact: &TripleDataset, iters: usize) -> Result<f64> {
    let dim = policy.params().len();
    let grad_at = |p: &[f64]| -> Result<Vec<f64>> {
        let pol = Policy::from_params(*policy.spec(), p.to_vec())?;
        Ok(batch_eval(cfg, &pol, reference, &exact.records, exact.weights.as_deref())?.grad)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut lambda = 0.0;
    let eps = 1e-4;
    for _ in 0..iters {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        let plus: Vec<f64> = policy.params().iter().zip(&v).map(|(p, d)| p + eps * d).collect();
        let minus: Vec<f64> = policy.params().iter().zip(&v).map(|(p, d)| p - eps * d).collect();
        let (gp, gm) = (grad_at(&plus)?, grad_at(&minus)?);
        let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        lambda = hv.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        v = hv;
    }
    Ok(lambda.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ratio::FSpec;
    use crate::policy::{PolicyKind, PolicySpec};
    use crate::preference::TargetConfig;
    use std::f64::consts::LN_2;

    fn target() -> Target {
        Target::generate(&TargetConfig {
            prompts: 2,
            vocab: 3,
            length: 2,
            beta: 0.5,
            ..TargetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn initialization_losses() {
        let t = target();
        let r = t.reference();
        let cfg = TrainConfig::new(HSpec::Lr, RatioSpec::Dpo { beta: 0.5 });
        assert!((triple_loss(&cfg, r, r, 0, 1, 2).unwrap() - LN_2).abs() < 1e-15);
        let cfg = TrainConfig::new(HSpec::sba(1.0), RatioSpec::Dpo { beta: 0.5 });
        assert!(triple_loss(&cfg, r, r, 1, 0, 8).unwrap().abs() < 1e-15);

        let cfg = TrainConfig::new(HSpec::Lr, RatioSpec::Dpo { beta: 0.5 });
        let d = t.sample_triples(50, 3).unwrap();
        assert!((batch_loss(&cfg, r, r, &d).unwrap() - LN_2).abs() < 1e-15);
        let e = t.enumerate_exact().unwrap();
        assert!((batch_loss(&cfg, r, r, &e).unwrap() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn clipping_freezes_loss_and_gradient() {
        let s = PolicySpec::new(1, 2, 1, PolicyKind::Tabular).unwrap();
        let reference = Policy::uniform(s).unwrap();
        // log R = β[(lp_l − lr_l) − (lp_w − lr_w)] = ln 0.001 with β = 1.
        let policy = Policy::from_params(s, vec![0.0, 0.001f64.ln()]).unwrap();
        let mut cfg = TrainConfig::new(HSpec::sba(-0.5), RatioSpec::Dpo { beta: 1.0 });
        let raw = triple_log_ratio(&cfg, &policy, &reference, Triple { x: 0, y_w: 0, y_l: 1 }).unwrap().exp();
        assert!((raw - 0.001).abs() < 1e-15);
        cfg.clip_lo = Some(0.01);
        let loss = triple_loss(&cfg, &policy, &reference, 0, 0, 1).unwrap();
        assert_eq!(loss, HSpec::sba(-0.5).loss_integrand(0.01));
        let g = triple_gradient(&cfg, &policy, &reference, 0, 0, 1).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dpo_gradient_at_zero_margin() {
        let t = target();
        let r = t.reference();
        let beta = 0.5;
        let cfg = TrainConfig::new(HSpec::Lr, RatioSpec::Dpo { beta });
        let g = triple_gradient(&cfg, r, r, 1, 2, 7).unwrap();
        let gw = r.grad_log_prob(1, 2).unwrap();
        let gl = r.grad_log_prob(1, 7).unwrap();
        // G_LR(1)·∇R = 0.5·(−β)(∇lp_w − ∇lp_l): descent raises the winner.
        for i in 0..g.len() {
            let want = -0.5 * beta * (gw[i] - gl[i]);
            assert!((g[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(HSpec::Lr, RatioSpec::Dpo { beta: 0.1 });
        assert!(cfg.validate().is_ok());
        cfg.clip_lo = Some(2.0);
        cfg.clip_hi = Some(1.0);
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(HSpec::Lr, RatioSpec::Dpo { beta: 0.1 });
        cfg.step_size = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig::new(HSpec::ba(0.0), RatioSpec::Dpo { beta: 0.1 });
        assert!(matches!(cfg.validate(), Err(BpoError::InvalidSpec(_))));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let t = target();
        let cfg = TrainConfig::new(HSpec::Lr, RatioSpec::Dpo { beta: 0.5 });
        assert!(matches!(batch_eval(&cfg, t.reference(), t.reference(), &[], None), Err(BpoError::EmptyBatch)));
    }

    #[test]
    fn batch_gradient_is_weighted_sum_of_triple_gradients() {
        let t = target();
        let mut policy = t.reference().clone();
        policy.params_mut().iter_mut().enumerate().for_each(|(i, p)| *p += 0.1 * (i as f64).sin());
        let e = t.enumerate_exact().unwrap();
        for ratio in [RatioSpec::Dpo { beta: 0.5 }, RatioSpec::FDpo { beta: 0.5, f: FSpec::Js }] {
            let cfg = TrainConfig::new(HSpec::ba(0.5), ratio);
            let be = batch_eval(&cfg, &policy, t.reference(), &e.records, e.weights.as_deref()).unwrap();
            let mut sum = vec![0.0; policy.params().len()];
            for (tr, w) in e.records.iter().zip(e.weights.as_ref().unwrap()) {
                let g = triple_gradient(&cfg, &policy, t.reference(), tr.x, tr.y_w, tr.y_l).unwrap();
                sum.iter_mut().zip(&g).for_each(|(s, gi)| *s += w * gi);
            }
            for (a, b) in be.grad.iter().zip(&sum) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn optimum_has_zero_bregman_objective() {
        let t = target();
        let opt = t.build_optimal_policy().unwrap();
        for h in [HSpec::Lr, HSpec::Lsif, HSpec::sba(-0.5)] {
            let cfg = TrainConfig::new(h, RatioSpec::Dpo { beta: t.beta() });
            assert!(bregman_objective_exact(&cfg, &opt, &t).unwrap().abs() < 1e-10);
            assert!(bregman_objective_exact(&cfg, t.reference(), &t).unwrap() > 0.0);
        }
    }

    #[test]
    fn short_exact_run_descends() {
        let t = target();
        let mut cfg = TrainConfig::new(HSpec::Lr, RatioSpec::Dpo { beta: t.beta() });
        cfg.steps = 50;
        cfg.step_size = 5.0;
        let out = train(&cfg, &t, t.reference().clone()).unwrap();
        assert_eq!(out.reports.len(), 51);
        for w in out.reports.windows(2) {
            assert!(w[1].loss <= w[0].loss + 1e-15);
        }
        assert!(out.reports.last().unwrap().kl_to_target < out.reports[0].kl_to_target);
    }

    #[test]
    fn numeric_abort_reports_step() {
        let t = target();
        let mut cfg = TrainConfig::new(HSpec::Lsif, RatioSpec::Dpo { beta: t.beta() });
        cfg.steps = 200;
        cfg.step_size = 1e6;
        match train(&cfg, &t, t.reference().clone()) {
            Err(TrainError::Numeric { step, .. }) => assert!(step > 0),
            other => panic!("expected numeric failure, got {:?}", other.map(|o| o.reports.len())),
        }
    }
}
