//! Verification procedures and desk-scale reports.
//!
//! Every `check_*` function returns [`VerificationReport`]s instead of
//! failing: a report records what was measured, the tolerance it was held
//! to and, when it fails, the worst offending input. [`verify_all`] runs the
//! whole registry against one target.

use std::fmt::Write as _;
use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::{Generator, HSpec};
use crate::error::{BpoError, Result};
use crate::math::{log_grid, softplus};
use crate::metrics::mean_kl;
use crate::model_ratio::{f_prime, FSpec, RatioSpec, TripleLogProbs};
use crate::numdiff;
use crate::policy::{Policy, PolicyKind, PolicySpec};
use crate::preference::{Target, Triple, TripleDataset};
use crate::trainer::{
    batch_eval, batch_loss, bregman_objective_on, curvature_estimate, ratio_gradient, train, triple_gradient, triple_log_ratio,
    triple_loss, Mode, StepReport, TrainConfig, TrainOutcome,
};
use crate::SCHEMA_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub name: String,
    pub passed: bool,
    /// Worst value observed (an error, a spread, or a minimum for positivity checks).
    pub measured: f64,
    pub tolerance: f64,
    pub context: String,
    /// The input that produced `measured`.
    pub worst_input: Option<String>,
}

impl VerificationReport {
    /// Passes when `measured ≤ tolerance`.
    fn at_most(name: impl Into<String>, measured: f64, tolerance: f64, context: impl Into<String>, worst: Option<String>) -> Self {
        VerificationReport {
            name: name.into(),
            passed: measured.is_finite() && measured <= tolerance,
            measured,
            tolerance,
            context: context.into(),
            worst_input: worst,
        }
    }

    fn errored(name: impl Into<String>, tolerance: f64, context: impl Into<String>, e: &BpoError) -> Self {
        VerificationReport {
            name: name.into(),
            passed: false,
            measured: f64::NAN,
            tolerance,
            context: context.into(),
            worst_input: Some(e.to_string()),
        }
    }
}

/// Running maximum that remembers its argument.
struct Worst {
    value: f64,
    input: Option<String>,
}

impl Worst {
    fn new() -> Self {
        Worst { value: 0.0, input: None }
    }

    fn offer(&mut self, value: f64, input: impl FnOnce() -> String) {
        // The first NaN sticks so that it is reported.
        if self.value.is_nan() {
            return;
        }
        if value.is_nan() || value > self.value || self.input.is_none() {
            self.value = value;
            self.input = Some(input());
        }
    }

    fn report(self, name: &str, tolerance: f64, context: &str) -> VerificationReport {
        VerificationReport::at_most(name, self.value, tolerance, context, self.input)
    }
}

/// Tolerances and sample sizes used by the checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Loss recovery identities (absolute).
    pub recovery: f64,
    /// f-PO with FKL against DPO (absolute, in log-ratio).
    pub fpo_collapse: f64,
    /// Generator derivative chain against finite differences (relative).
    pub derivative_rel: f64,
    /// Parameter gradients against finite differences (relative).
    pub gradient_rel: f64,
    /// Spread of `batch_loss − D_h` across parameter draws.
    pub constant_spread: f64,
    pub optimum_kl: f64,
    /// Triple-wise `|R_θ − R_data| / R_data` after training.
    pub optimum_ratio_rel: f64,
    pub pairwise_kl: f64,
    /// Closed-form identities (relative).
    pub closed_form_rel: f64,
    /// Step-0 gradient-norm ratios (relative).
    pub norm_ratio_rel: f64,
    /// Sampled-vs-exact loss, in standard errors.
    pub sampled_sigmas: f64,
    pub random_states: usize,
    pub gradient_states: usize,
    pub parameter_draws: usize,
    pub sampled_triples: usize,
    /// Step cap for the optimality runs (they stop once the gradient vanishes).
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            recovery: 1e-12,
            fpo_collapse: 1e-10,
            derivative_rel: 1e-6,
            gradient_rel: 1e-5,
            constant_spread: 1e-8,
            optimum_kl: 1e-6,
            optimum_ratio_rel: 1e-3,
            pairwise_kl: 1e-5,
            closed_form_rel: 1e-10,
            norm_ratio_rel: 1e-6,
            sampled_sigmas: 3.0,
            random_states: 100,
            gradient_states: 20,
            parameter_draws: 10,
            sampled_triples: 100_000,
            max_steps: 5000,
            seed: 7,
        }
    }
}

/// Gradient norm below which optimality runs stop.
const OPTIMUM_GRAD_NORM: f64 = 1e-12;

pub fn target_digest(target: &Target) -> String {
    let c = target.config();
    format!(
        "P={} V={} L={} kind={:?} beta={} reward_seed={} reference_seed={} reward_range={} reference_scale={}",
        c.prompts, c.vocab, c.length, c.kind, c.beta, c.reward_seed, c.reference_seed, c.reward_range, c.reference_scale
    )
}

/// Generators exercised by the pointwise and gradient checks.
pub fn generator_registry() -> Vec<HSpec> {
    vec![
        HSpec::Lr,
        HSpec::Kliep,
        HSpec::Lsif,
        HSpec::ba(-0.5),
        HSpec::ba(0.5),
        HSpec::ba(2.0),
        HSpec::sba(-0.5),
        HSpec::sba(0.0),
        HSpec::sba(1.0),
        interpolated_sba_lr(),
    ]
}

/// `0.3·SBA(−0.5, 4) + 0.7·LR`.
pub fn interpolated_sba_lr() -> HSpec {
    HSpec::mixture(vec![(0.3, HSpec::sba(-0.5)), (0.7, HSpec::Lr)])
}

/// Generators that must all reach the same optimum.
pub fn optimality_registry() -> Vec<HSpec> {
    vec![HSpec::Lr, HSpec::Kliep, HSpec::Lsif, HSpec::ba(0.5), HSpec::sba(1.0), interpolated_sba_lr()]
}

/// Model ratios exercised by the gradient checks.
pub fn ratio_registry(beta: f64) -> Vec<RatioSpec> {
    let mut v = vec![RatioSpec::Dpo { beta }];
    for f in [FSpec::Rkl, FSpec::Fkl, FSpec::Js, FSpec::Alpha { alpha: 0.1 }, FSpec::ChiSq] {
        v.push(RatioSpec::FDpo { beta, f });
    }
    for f in [FSpec::Fkl, FSpec::Js, FSpec::Jeffrey] {
        v.push(RatioSpec::FPo { beta, f });
    }
    v.push(RatioSpec::SimPo { beta, gamma: 0.5 });
    v
}

// ---------------------------------------------------------------------------
// Generators

/// `h″ > 0` and `G_h > 0` on a 200-point log grid over `[1e−3, 1e3]`.
/// `measured` is the smallest value seen; the check passes when it is positive.
pub fn check_positivity(name: &str, h: &dyn Generator) -> VerificationReport {
    let mut min = f64::INFINITY;
    let mut at = String::new();
    for r in log_grid(1e-3, 1e3, 200) {
        for (what, v) in [("h''", h.h_second(r)), ("G", h.grad_magnitude(r))] {
            if !(v >= min) {
                min = v;
                at = format!("{what}({r:.6e}) = {v:.6e}");
            }
        }
    }
    VerificationReport {
        name: format!("positivity[{name}]"),
        passed: min > 0.0,
        measured: min,
        tolerance: 0.0,
        context: "h'' and G_h on 200 log-spaced r in [1e-3, 1e3]; must stay > 0".into(),
        worst_input: Some(at),
    }
}

/// `|a − b| / max(|a|, |b|, 1e−3)`: relative, but absolute for tiny values.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// `h′`, `h″` and `G_h` against central differences (step `1e−5·r`).
pub fn check_derivative_chain(h: &HSpec, tol: f64) -> VerificationReport {
    let mut worst = Worst::new();
    for r in log_grid(1e-3, 1e3, 200) {
        let d = 1e-5 * r;
        let pairs = [
            ("h'", h.h_prime(r), numdiff::derivative(|x| h.h(x), r, d)),
            ("h''", h.h_second(r), numdiff::derivative(|x| h.h_prime(x), r, d)),
            ("G", h.grad_magnitude(r), numdiff::derivative(|x| h.loss_integrand(x), r, d)),
        ];
        for (what, exact, fd) in pairs {
            worst.offer(rel_err(exact, fd), || format!("{what} at r = {r:.6e}: {exact:.12e} vs FD {fd:.12e}"));
        }
    }
    worst.report(&format!("derivative_chain[{h}]"), tol, "central differences, step 1e-5*r, 200 log-spaced r")
}

/// `B_h ≥ 0` on random pairs and `B_h(a‖a) = 0`.
pub fn check_bregman_properties(h: &HSpec, seed: u64) -> VerificationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::new();
    for _ in 0..500 {
        let a = rng.random_range(-4.0f64..4.0).exp();
        let b = rng.random_range(-4.0f64..4.0).exp();
        let scale = 1.0 + h.h(a).abs() + h.h(b).abs();
        let neg = (-h.bregman(a, b) / scale).max(0.0);
        worst.offer(neg, || format!("B({a:.6e} || {b:.6e}) = {:.3e}", h.bregman(a, b)));
        let diag = h.bregman(a, a).abs();
        worst.offer(diag, || format!("B({a:.6e} || {a:.6e}) = {diag:.3e}"));
    }
    worst.report(
        &format!("bregman_nonnegative[{h}]"),
        1e-12,
        "500 log-uniform pairs in [e^-4, e^4]; negative part scaled by 1+|h(a)|+|h(b)|, plus |B(a||a)|",
    )
}

/// `loss_integrand(LR, r) = ln(1 + r)`.
pub fn check_logistic_identity(tol: f64) -> VerificationReport {
    let mut worst = Worst::new();
    for r in log_grid(1e-3, 1e3, 200) {
        let v = HSpec::Lr.loss_integrand(r);
        worst.offer((v - r.ln_1p()).abs(), || format!("r = {r:.6e}: {v:.17e} vs {:.17e}", r.ln_1p()));
    }
    worst.report("logistic_integrand_identity", tol, "loss_integrand(LR, r) vs ln(1+r), 200 log-spaced r")
}

/// `G_BA(λ) / G_SBA(λ, 4) = 4(λ+1)` pointwise.
pub fn check_amplification_pointwise(tol: f64) -> VerificationReport {
    let mut worst = Worst::new();
    for lambda in [-0.5, 0.5, 1.0, 2.0] {
        let (ba, sba) = (HSpec::ba(lambda), HSpec::sba(lambda));
        for r in log_grid(1e-3, 1e3, 200) {
            let ratio = ba.grad_magnitude(r) / sba.grad_magnitude(r);
            let want = 4.0 * (lambda + 1.0);
            worst.offer((ratio / want - 1.0).abs(), || format!("lambda = {lambda}, r = {r:.6e}: ratio {ratio}"));
        }
    }
    worst.report("ba_sba_weight_ratio", tol, "G_BA / G_SBA(s=4) = 4(lambda+1), lambda in {-0.5,0.5,1,2}")
}

/// `G_SBA(λ, s=4)(1) = 0.5 = G_LR(1)` exactly.
pub fn check_sba_unit_weight() -> VerificationReport {
    let mut worst = Worst::new();
    let lr = HSpec::Lr.grad_magnitude(1.0);
    worst.offer((lr - 0.5).abs(), || format!("G_LR(1) = {lr}"));
    for lambda in [-0.5, 0.0, 0.5, 1.0, 2.0] {
        let g = HSpec::sba(lambda).grad_magnitude(1.0);
        worst.offer((g - 0.5).abs(), || format!("G_SBA({lambda},4)(1) = {g}"));
    }
    worst.report("sba_unit_weight", 0.0, "G_SBA(lambda, s=4)(1) and G_LR(1) must equal 0.5 exactly")
}

// ---------------------------------------------------------------------------
// Model ratios and losses on random states

/// A random (policy, reference, triple, β) configuration on a small space.
#[derive(Debug, Clone)]
pub struct RandomState {
    pub policy: Policy,
    pub reference: Policy,
    pub triple: Triple,
    pub beta: f64,
}

impl RandomState {
    pub fn log_probs(&self) -> Result<TripleLogProbs> {
        let Triple { x, y_w, y_l } = self.triple;
        let len = self.policy.spec().length;
        Ok(TripleLogProbs {
            lp_w: self.policy.log_prob(x, y_w)?,
            lp_l: self.policy.log_prob(x, y_l)?,
            lr_w: self.reference.log_prob(x, y_w)?,
            lr_l: self.reference.log_prob(x, y_l)?,
            len_w: len,
            len_l: len,
        })
    }

    fn describe(&self) -> String {
        format!("{:?} {:?} beta={} params={:?}", self.policy.spec().kind, self.triple, self.beta, self.policy.params())
    }
}

/// `n` random states on `P=2, V=3, L=2`; alternate states use the factorized kind.
/// The policy is the reference plus `N(0, 0.7²)` noise.
pub fn random_states(n: usize, seed: u64) -> Result<Vec<RandomState>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).map_err(|e| BpoError::InvalidSpec(e.to_string()))?;
    (0..n)
        .map(|i| {
            let kind = if i % 2 == 0 { PolicyKind::Tabular } else { PolicyKind::Factorized };
            let spec = PolicySpec::new(2, 3, 2, kind)?;
            let ref_params: Vec<f64> = (0..spec.num_params()).map(|_| normal.sample(&mut rng)).collect();
            let params: Vec<f64> = ref_params.iter().map(|p| p + 0.7 * normal.sample(&mut rng)).collect();
            let n = spec.num_sequences();
            let x = rng.random_range(0..spec.prompts);
            let y_w = rng.random_range(0..n);
            let y_l = (y_w + rng.random_range(1..n)) % n;
            Ok(RandomState {
                policy: Policy::from_params(spec, params)?,
                reference: Policy::from_params(spec, ref_params)?,
                triple: Triple { x, y_w, y_l },
                beta: rng.random_range(0.05..2.0),
            })
        })
        .collect()
}

/// LR loss with the DPO ratio equals `−ln σ(β·margin)`.
pub fn check_dpo_recovery(states: &[RandomState], tol: f64) -> VerificationReport {
    let name = "dpo_recovery";
    let mut worst = Worst::new();
    for s in states {
        let cfg = TrainConfig::new(HSpec::Lr, RatioSpec::Dpo { beta: s.beta });
        let Triple { x, y_w, y_l } = s.triple;
        let res = triple_loss(&cfg, &s.policy, &s.reference, x, y_w, y_l).and_then(|l| Ok((l, s.log_probs()?)));
        match res {
            Ok((loss, t)) => {
                let dpo = softplus(-t.margin(s.beta));
                worst.offer((loss - dpo).abs(), || format!("{}: {loss:.17e} vs {dpo:.17e}", s.describe()));
            }
            Err(e) => return VerificationReport::errored(name, tol, "", &e),
        }
    }
    worst.report(name, tol, &format!("{} random states; |L_LR(DPO ratio) - (-ln sigmoid(beta*margin))|", states.len()))
}

/// LR loss with the f-DPO ratio equals `−ln σ(β f′(u_w) − β f′(u_l))`, and f-DPO(RKL) ≡ DPO.
pub fn check_fdpo_recovery(states: &[RandomState], tol: f64) -> Vec<VerificationReport> {
    let mut recovery = Worst::new();
    let mut collapse = Worst::new();
    for s in states {
        let t = match s.log_probs() {
            Ok(t) => t,
            Err(e) => return vec![VerificationReport::errored("fdpo_recovery", tol, "", &e)],
        };
        let Triple { x, y_w, y_l } = s.triple;
        for f in [FSpec::Fkl, FSpec::Js, FSpec::Alpha { alpha: 0.1 }, FSpec::ChiSq] {
            let cfg = TrainConfig::new(HSpec::Lr, RatioSpec::FDpo { beta: s.beta, f });
            let explicit = f_prime(&f, (t.lp_w - t.lr_w).exp())
                .and_then(|fw| Ok((fw, f_prime(&f, (t.lp_l - t.lr_l).exp())?)))
                .map(|(fw, fl)| softplus(-(s.beta * fw - s.beta * fl)));
            match (triple_loss(&cfg, &s.policy, &s.reference, x, y_w, y_l), explicit) {
                (Ok(loss), Ok(want)) => {
                    recovery.offer((loss - want).abs(), || format!("{} {}: {loss:.17e} vs {want:.17e}", f.name(), s.describe()))
                }
                (Err(e), _) | (_, Err(e)) => return vec![VerificationReport::errored("fdpo_recovery", tol, "", &e)],
            }
        }
        let rkl = RatioSpec::FDpo { beta: s.beta, f: FSpec::Rkl }.log_ratio(&t);
        let dpo = RatioSpec::Dpo { beta: s.beta }.log_ratio(&t);
        match (rkl, dpo) {
            (Ok(a), Ok(b)) => collapse.offer((a - b).abs(), || format!("{}: {a:.17e} vs {b:.17e}", s.describe())),
            (Err(e), _) | (_, Err(e)) => return vec![VerificationReport::errored("fdpo_rkl_collapse", tol, "", &e)],
        }
    }
    let n = states.len();
    vec![
        recovery.report("fdpo_recovery", tol, &format!("{n} random states x f in {{FKL, JS, Alpha(0.1), ChiSq}}")),
        collapse.report("fdpo_rkl_collapse", tol, &format!("{n} random states; log R of f-DPO(RKL) vs DPO")),
    ]
}

/// `log R` of f-PO(FKL) equals the DPO log-ratio.
pub fn check_fpo_collapse(states: &[RandomState], tol: f64) -> VerificationReport {
    let name = "fpo_fkl_collapse";
    let mut worst = Worst::new();
    for s in states {
        let t = match s.log_probs() {
            Ok(t) => t,
            Err(e) => return VerificationReport::errored(name, tol, "", &e),
        };
        match (RatioSpec::FPo { beta: s.beta, f: FSpec::Fkl }.log_ratio(&t), RatioSpec::Dpo { beta: s.beta }.log_ratio(&t)) {
            (Ok(a), Ok(b)) => worst.offer((a - b).abs(), || format!("{}: {a:.17e} vs {b:.17e}", s.describe())),
            (Err(e), _) | (_, Err(e)) => return VerificationReport::errored(name, tol, "", &e),
        }
    }
    worst.report(name, tol, &format!("{} random states; |log R_fPO[FKL] - log R_DPO|", states.len()))
}

/// Antisymmetry of DPO/f-DPO log-ratios and the SimPO `2γ` offset.
pub fn check_ratio_antisymmetry(states: &[RandomState], tol: f64) -> VerificationReport {
    let name = "ratio_antisymmetry";
    let mut worst = Worst::new();
    for s in states {
        let t = match s.log_probs() {
            Ok(t) => t,
            Err(e) => return VerificationReport::errored(name, tol, "", &e),
        };
        for spec in ratio_registry(s.beta) {
            let offset = match spec {
                RatioSpec::Dpo { .. } | RatioSpec::FDpo { .. } => 0.0,
                RatioSpec::SimPo { gamma, .. } => 2.0 * gamma,
                RatioSpec::FPo { .. } => continue,
            };
            match (spec.log_ratio(&t), spec.log_ratio(&t.swapped())) {
                (Ok(a), Ok(b)) => worst.offer((a + b - offset).abs(), || format!("{} {}", spec.name(), s.describe())),
                (Err(e), _) | (_, Err(e)) => return VerificationReport::errored(name, tol, spec.name(), &e),
            }
        }
    }
    worst.report(name, tol, "log R(w,l) + log R(l,w) = 0 (DPO, f-DPO) or 2*gamma (SimPO)")
}

/// Parameter gradients against finite differences for every (h, ratio) pair,
/// the `G_h(R)·∇R` structure, and single-triple descent.
pub fn check_gradients(states: &[RandomState], tol: f64) -> Vec<VerificationReport> {
    let mut fd = Worst::new();
    let mut structure = Worst::new();
    let mut descent = Worst::new();
    let mut pairs = 0usize;
    for h in generator_registry() {
        for (ri, _) in ratio_registry(1.0).iter().enumerate() {
            pairs += 1;
            for s in states {
                let ratio = ratio_registry(s.beta)[ri].clone();
                let cfg = TrainConfig::new(h.clone(), ratio);
                if let Err(e) = gradient_case(&cfg, s, &mut fd, &mut structure, &mut descent) {
                    let e = VerificationReport::errored("gradient_fd", tol, format!("{h} / {}", cfg.ratio.name()), &e);
                    return vec![e];
                }
            }
        }
    }
    let n = states.len();
    vec![
        fd.report(
            "gradient_fd",
            tol,
            &format!("{pairs} (h, ratio) pairs x {n} states; central differences, step 1e-6; error relative to max |component|"),
        ),
        structure.report("gradient_structure", 1e-12, "triple_gradient vs G_h(R) * grad R, relative"),
        descent.report(
            "descent_decreases_ratio",
            0.0,
            "one normalized descent step (length 1e-4) on a single triple; measured = max(0, R_after - R_before)",
        ),
    ]
}

fn gradient_case(cfg: &TrainConfig, s: &RandomState, fd: &mut Worst, structure: &mut Worst, descent: &mut Worst) -> Result<()> {
    let Triple { x, y_w, y_l } = s.triple;
    let spec = *s.policy.spec();
    let analytic = triple_gradient(cfg, &s.policy, &s.reference, x, y_w, y_l)?;
    let loss_at = |p: &[f64]| {
        Policy::from_params(spec, p.to_vec())
            .and_then(|pol| triple_loss(cfg, &pol, &s.reference, x, y_w, y_l))
            .unwrap_or(f64::NAN)
    };
    let numeric = numdiff::gradient(loss_at, s.policy.params(), 1e-6);
    let err = numdiff::max_relative_error(&analytic, &numeric, 1e-6);
    let label = || format!("{} / {} at {}", cfg.h, cfg.ratio.name(), s.describe());
    fd.offer(err, label);

    let r = triple_log_ratio(cfg, &s.policy, &s.reference, s.triple)?.exp();
    let g = cfg.h.grad_magnitude(r);
    let dr = ratio_gradient(cfg, &s.policy, &s.reference, s.triple)?;
    let built: Vec<f64> = dr.iter().map(|v| g * v).collect();
    structure.offer(numdiff::max_relative_error(&analytic, &built, 1e-300), label);

    let norm = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let stepped: Vec<f64> = s.policy.params().iter().zip(&analytic).map(|(p, gi)| p - 1e-4 * gi / norm).collect();
    let after = triple_log_ratio(cfg, &Policy::from_params(spec, stepped)?, &s.reference, s.triple)?.exp();
    descent.offer((after - r).max(0.0), || format!("R {r:.17e} -> {after:.17e}: {}", label()));
    Ok(())
}

// ---------------------------------------------------------------------------
// Target-level checks

fn dpo_config(h: HSpec, target: &Target) -> TrainConfig {
    let mut cfg = TrainConfig::new(h, RatioSpec::Dpo { beta: target.beta() });
    cfg.mode = Mode::Exact;
    cfg
}

/// Prop. 1 and the optimality condition on every enumerated triple.
pub fn check_optimal_ratio(target: &Target, exact: &TripleDataset, tol: f64) -> Vec<VerificationReport> {
    let ctx = target_digest(target);
    let opt = match target.build_optimal_policy() {
        Ok(p) => p,
        Err(e) => return vec![VerificationReport::errored("optimal_ratio_identity", tol, ctx, &e)],
    };
    let mut rhs = Worst::new();
    let mut cond = Worst::new();
    let beta = target.beta();
    for tr in &exact.records {
        let Triple { x, y_w, y_l } = *tr;
        let res = (|| -> Result<(f64, f64, f64, f64)> {
            let (ow, ol) = (opt.log_prob(x, y_w)?, opt.log_prob(x, y_l)?);
            let (rw, rl) = (target.reference().log_prob(x, y_w)?, target.reference().log_prob(x, y_l)?);
            let built = (ow - ol).exp();
            let formula = target.optimal_ratio_rhs(x, y_w, y_l)?;
            let sig = crate::math::sigmoid(beta * (ow - rw) - beta * (ol - rl));
            Ok((built, formula, sig, target.preference_prob(x, y_w, y_l)?))
        })();
        match res {
            Ok((built, formula, sig, p)) => {
                rhs.offer((formula / built - 1.0).abs(), || format!("{tr:?}: rhs {formula:.17e} vs pi* ratio {built:.17e}"));
                cond.offer((sig - p).abs(), || format!("{tr:?}: {sig:.17e} vs {p:.17e}"));
            }
            Err(e) => return vec![VerificationReport::errored("optimal_ratio_identity", tol, ctx, &e)],
        }
    }
    vec![
        rhs.report("optimal_ratio_identity", tol, &format!("{ctx}; relative error over {} triples", exact.len())),
        cond.report("optimality_condition", tol, &format!("{ctx}; |sigmoid(beta*margin(pi*)) - p| over {} triples", exact.len())),
    ]
}

/// `D_h(π*) = 0`.
pub fn check_bregman_at_optimum(target: &Target, exact: &TripleDataset, h: &HSpec, tol: f64) -> VerificationReport {
    let name = format!("bregman_at_optimum[{h}]");
    let ctx = target_digest(target);
    match target
        .build_optimal_policy()
        .and_then(|opt| bregman_objective_on(&dpo_config(h.clone(), target), &opt, target, exact))
    {
        Ok(v) => VerificationReport::at_most(name, v.abs(), tol, ctx, None),
        Err(e) => VerificationReport::errored(name, tol, ctx, &e),
    }
}

/// `exact batch_loss − D_h` does not depend on the parameters.
pub fn check_constant_offset(target: &Target, exact: &TripleDataset, h: &HSpec, draws: usize, seed: u64, tol: f64) -> VerificationReport {
    let name = format!("constant_offset[{h}]");
    let ctx = format!("{}; {draws} parameter draws (reference + N(0,1))", target_digest(target));
    let cfg = dpo_config(h.clone(), target);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut offsets = Vec::with_capacity(draws);
    for _ in 0..draws {
        let params: Vec<f64> = target.reference().params().iter().map(|p| p + normal.sample(&mut rng)).collect();
        let res = Policy::from_params(*target.spec(), params).and_then(|pol| {
            let l = batch_loss(&cfg, &pol, target.reference(), exact)?;
            let d = bregman_objective_on(&cfg, &pol, target, exact)?;
            Ok(l - d)
        });
        match res {
            Ok(c) => offsets.push(c),
            Err(e) => return VerificationReport::errored(name, tol, ctx, &e),
        }
    }
    let lo = offsets.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = offsets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    VerificationReport::at_most(name, hi - lo, tol, ctx, Some(format!("offsets {offsets:?}")))
}

/// `1 / λ_max` of the exact loss Hessian, taking the larger of the curvatures
/// at the reference and (for tabular targets) at the optimum.
pub fn auto_step_size(cfg: &TrainConfig, target: &Target, exact: &TripleDataset) -> Result<f64> {
    let reference = target.reference();
    let mut lambda = curvature_estimate(cfg, reference, reference, exact, 30)?;
    if target.spec().kind == PolicyKind::Tabular {
        let opt = target.build_optimal_policy()?;
        lambda = lambda.max(curvature_estimate(cfg, &opt, reference, exact, 30)?);
    } else {
        // The factorized optimum is unknown; leave headroom.
        lambda *= 2.0;
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(BpoError::NonFinite(format!("curvature estimate {lambda}")));
    }
    Ok(1.0 / lambda)
}

/// Full-batch gradient descent from the reference until the gradient vanishes.
pub fn train_to_optimum(target: &Target, exact: &TripleDataset, h: &HSpec, max_steps: usize) -> Result<TrainOutcome> {
    let mut cfg = dpo_config(h.clone(), target);
    cfg.steps = max_steps;
    cfg.stop_grad_norm = Some(OPTIMUM_GRAD_NORM);
    cfg.step_size = auto_step_size(&cfg, target, exact)?;
    train(&cfg, target, target.reference().clone()).map_err(|e| match e {
        crate::trainer::TrainError::Setup(e) => e,
        crate::trainer::TrainError::Numeric { step, detail, .. } => BpoError::NonFinite(format!("step {step}: {detail}")),
    })
}

/// Exact-mode training of the tabular policy reaches `π*` for every generator,
/// and all generators agree on the final policy.
pub fn check_optimality(target: &Target, exact: &TripleDataset, hs: &[HSpec], tol: &Tolerances) -> Vec<VerificationReport> {
    let ctx = target_digest(target);
    let runs: Vec<(HSpec, Result<TrainOutcome>)> = hs
        .par_iter()
        .map(|h| (h.clone(), train_to_optimum(target, exact, h, tol.max_steps)))
        .collect();
    let mut reports = Vec::new();
    let mut finals = Vec::new();
    for (h, run) in runs {
        let out = match run {
            Ok(out) => out,
            Err(e) => {
                reports.push(VerificationReport::errored(format!("optimum_kl[{h}]"), tol.optimum_kl, ctx.clone(), &e));
                continue;
            }
        };
        let last = out.reports.last().expect("at least one report");
        let steps = format!("{ctx}; {} steps, final grad norm {:.3e}", last.step, last.grad_norm);
        reports.push(VerificationReport::at_most(format!("optimum_kl[{h}]"), last.kl_to_target, tol.optimum_kl, steps.clone(), None));
        let cfg = dpo_config(h.clone(), target);
        let mut worst = Worst::new();
        for tr in &exact.records {
            let res = triple_log_ratio(&cfg, &out.policy, target.reference(), *tr)
                .and_then(|lr| Ok((lr.exp(), target.data_ratio(tr.x, tr.y_w, tr.y_l)?)));
            match res {
                Ok((r, d)) => worst.offer(((r - d) / d).abs(), || format!("{tr:?}: R_theta {r:.12e} vs R_data {d:.12e}")),
                Err(e) => worst.offer(f64::NAN, || e.to_string()),
            }
        }
        reports.push(worst.report(&format!("optimum_ratio[{h}]"), tol.optimum_ratio_rel, &steps));
        finals.push((h, out.policy));
    }
    let mut pairwise = Worst::new();
    for (i, (ha, pa)) in finals.iter().enumerate() {
        for (hb, pb) in &finals[i + 1..] {
            for (p, q) in [(pa, pb), (pb, pa)] {
                let kl = mean_kl(p, q, target.prompt_dist()).unwrap_or(f64::NAN);
                pairwise.offer(kl, || format!("KL({ha} final || {hb} final) (either direction)"));
            }
        }
    }
    reports.push(pairwise.report("optimum_agreement", tol.pairwise_kl, &format!("{ctx}; pairwise KL between {} final policies", finals.len())));
    reports
}

/// Step-0 gradient norms: `‖∇BA(λ)‖ / ‖∇SBA(λ,4)‖ = 4(λ+1)` and `‖∇SBA(λ,4)‖ = ‖∇LR‖`
/// at the reference (KLIEP stands in for BA at `λ = 0`), plus the same ratio at random parameters.
pub fn check_norm_amplification(target: &Target, tol: &Tolerances) -> Vec<VerificationReport> {
    let ctx = target_digest(target);
    let lambdas = [-0.5, 0.0, 0.5, 1.0, 2.0];
    let mut configs = vec![dpo_config(HSpec::Lr, target)];
    for &l in &lambdas {
        configs.push(dpo_config(if l == 0.0 { HSpec::Kliep } else { HSpec::ba(l) }, target));
        configs.push(dpo_config(HSpec::sba(l), target));
    }
    let traces = gradient_norm_trace(&configs, target, 1);
    let norm0 = |i: usize| traces[i].norms.first().copied().unwrap_or(f64::NAN);
    let lr = norm0(0);
    let mut ratio = Worst::new();
    let mut matched = Worst::new();
    for (k, &l) in lambdas.iter().enumerate() {
        let (ba, sba) = (norm0(1 + 2 * k), norm0(2 + 2 * k));
        let want = 4.0 * (l + 1.0);
        ratio.offer((ba / sba / want - 1.0).abs(), || format!("lambda = {l}: {ba:.12e} / {sba:.12e} vs {want}"));
        matched.offer((sba / lr - 1.0).abs(), || format!("lambda = {l}: SBA {sba:.12e} vs LR {lr:.12e}"));
    }

    // Away from initialization the ratio still holds triple by triple.
    let mut random = Worst::new();
    if let Ok(exact) = target.enumerate_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(tol.seed);
        let params: Vec<f64> = target.reference().params().iter().map(|p| p + rng.random_range(-1.0..1.0)).collect();
        if let Ok(pol) = Policy::from_params(*target.spec(), params) {
            for l in [-0.5, 0.5, 1.0, 2.0] {
                let norm = |h: HSpec| {
                    batch_eval(&dpo_config(h, target), &pol, target.reference(), &exact.records, exact.weights.as_deref())
                        .map(|b| b.grad_norm())
                        .unwrap_or(f64::NAN)
                };
                let (ba, sba) = (norm(HSpec::ba(l)), norm(HSpec::sba(l)));
                let want = 4.0 * (l + 1.0);
                random.offer((ba / sba / want - 1.0).abs(), || format!("lambda = {l} at perturbed parameters: {}", ba / sba));
            }
        }
    }
    vec![
        ratio.report("step0_norm_ratio", tol.norm_ratio_rel, &format!("{ctx}; exact batch at the reference")),
        matched.report("step0_sba_matches_lr", tol.norm_ratio_rel, &format!("{ctx}; exact batch at the reference")),
        random.report("norm_ratio_perturbed", tol.closed_form_rel, &format!("{ctx}; reference + U(-1,1) parameters")),
    ]
}

/// Mean loss of `n` sampled triples lies within `sigmas` standard errors of the exact loss.
/// Evaluated at a perturbed policy so that the per-triple losses vary.
pub fn check_sampled_loss(target: &Target, exact: &TripleDataset, n: usize, seed: u64, sigmas: f64) -> VerificationReport {
    let name = "sampled_vs_exact_loss";
    let ctx = format!("{}; {n} sampled triples, seed {seed}, LR/DPO at reference + U(-1,1)", target_digest(target));
    let res = (|| -> Result<(f64, f64, f64)> {
        let cfg = dpo_config(HSpec::Lr, target);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<f64> = target.reference().params().iter().map(|p| p + rng.random_range(-1.0..1.0)).collect();
        let pol = Policy::from_params(*target.spec(), params)?;
        let exact_loss = batch_loss(&cfg, &pol, target.reference(), exact)?;
        let data = target.sample_triples(n, seed)?;
        let losses: Vec<f64> = data
            .records
            .iter()
            .map(|t| triple_loss(&cfg, &pol, target.reference(), t.x, t.y_w, t.y_l))
            .collect::<Result<_>>()?;
        let mean = losses.iter().sum::<f64>() / n as f64;
        let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        Ok((mean, exact_loss, (var / n as f64).sqrt()))
    })();
    match res {
        Ok((mean, exact_loss, se)) => VerificationReport::at_most(
            name,
            (mean - exact_loss).abs() / se,
            sigmas,
            ctx,
            Some(format!("sampled {mean:.10} vs exact {exact_loss:.10}, standard error {se:.3e}")),
        ),
        Err(e) => VerificationReport::errored(name, sigmas, ctx, &e),
    }
}

/// Run every registered check against `target`. Never fails; problems become failing reports.
pub fn verify_all(target: &Target, tol: &Tolerances) -> Vec<VerificationReport> {
    let mut out = Vec::new();
    for h in generator_registry() {
        out.push(check_positivity(&h.to_string(), &h));
        out.push(check_derivative_chain(&h, tol.derivative_rel));
        out.push(check_bregman_properties(&h, tol.seed));
    }
    out.push(check_logistic_identity(tol.recovery));
    out.push(check_amplification_pointwise(tol.closed_form_rel));
    out.push(check_sba_unit_weight());

    match random_states(tol.random_states.max(tol.gradient_states), tol.seed) {
        Ok(states) => {
            let some = &states[..tol.random_states];
            out.push(check_dpo_recovery(some, tol.recovery));
            out.extend(check_fdpo_recovery(some, tol.recovery));
            out.push(check_fpo_collapse(some, tol.fpo_collapse));
            out.push(check_ratio_antisymmetry(some, tol.recovery));
            out.extend(check_gradients(&states[..tol.gradient_states], tol.gradient_rel));
        }
        Err(e) => out.push(VerificationReport::errored("random_states", 0.0, "", &e)),
    }

    let exact = match target.enumerate_exact() {
        Ok(e) => e,
        Err(e) => {
            out.push(VerificationReport::errored("enumeration", 0.0, target_digest(target), &e));
            return out;
        }
    };
    out.extend(check_optimal_ratio(target, &exact, tol.closed_form_rel));
    for h in optimality_registry() {
        out.push(check_constant_offset(target, &exact, &h, tol.parameter_draws, tol.seed, tol.constant_spread));
        out.push(check_bregman_at_optimum(target, &exact, &h, tol.closed_form_rel));
    }
    if target.spec().kind == PolicyKind::Tabular {
        out.extend(check_optimality(target, &exact, &optimality_registry(), tol));
    }
    out.extend(check_norm_amplification(target, tol));
    out.push(check_sampled_loss(target, &exact, tol.sampled_triples, tol.seed, tol.sampled_sigmas));
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub schema_version: u32,
    pub context: String,
    pub passed: bool,
    pub tolerances: Tolerances,
    pub reports: Vec<VerificationReport>,
}

impl VerificationSummary {
    pub fn new(target: &Target, tolerances: Tolerances, reports: Vec<VerificationReport>) -> Self {
        VerificationSummary {
            schema_version: SCHEMA_VERSION,
            context: target_digest(target),
            passed: reports.iter().all(|r| r.passed),
            tolerances,
            reports,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub winrate_proxy: f64,
    pub entropy_mean: f64,
    pub margin_mean: f64,
    pub margin_std: f64,
    pub kl_to_target: f64,
    pub steps: usize,
    pub status: String,
}

/// One SBA(λ, s) run per λ from `base` (its generator is replaced; the scale `s`
/// is kept when `base.h` is SBA, otherwise 4). Margin statistics are computed over
/// the exact enumeration at the final policy. Runs execute concurrently; failures
/// become rows with a non-`ok` status.
pub fn lambda_sweep(target: &Target, lambdas: &[f64], base: &TrainConfig) -> Result<Vec<SweepRow>> {
    sweep(target, lambdas, base, false)
}

/// As [`lambda_sweep`], but each run uses [`auto_step_size`] for its own generator
/// instead of `base.step_size`.
pub fn lambda_sweep_auto_step(target: &Target, lambdas: &[f64], base: &TrainConfig) -> Result<Vec<SweepRow>> {
    sweep(target, lambdas, base, true)
}

fn sweep(target: &Target, lambdas: &[f64], base: &TrainConfig, auto_step: bool) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(BpoError::InvalidSpec("lambda sweep needs at least one lambda".into()));
    }
    let s = match base.h {
        HSpec::Sba { s, .. } => s,
        _ => crate::divergence::DEFAULT_SBA_SCALE,
    };
    let exact = target.enumerate_exact()?;
    Ok(lambdas
        .par_iter()
        .map(|&lambda| {
            let failed = |status: String| SweepRow {
                lambda,
                winrate_proxy: f64::NAN,
                entropy_mean: f64::NAN,
                margin_mean: f64::NAN,
                margin_std: f64::NAN,
                kl_to_target: f64::NAN,
                steps: 0,
                status,
            };
            let mut cfg = TrainConfig {
                h: HSpec::sba_scaled(lambda, s),
                ..base.clone()
            };
            if auto_step {
                match cfg.validate().and_then(|_| auto_step_size(&cfg, target, &exact)) {
                    Ok(eta) => cfg.step_size = eta,
                    Err(e) => return failed(format!("error: {e}")),
                }
            }
            let out = match train(&cfg, target, target.reference().clone()) {
                Ok(o) => o,
                Err(e) => return failed(format!("error: {e}")),
            };
            let last = out.reports.last().expect("at least one report");
            match batch_eval(&cfg.unclipped(), &out.policy, target.reference(), &exact.records, exact.weights.as_deref()) {
                Ok(eval) => SweepRow {
                    lambda,
                    winrate_proxy: last.winrate_proxy,
                    entropy_mean: last.entropy_mean,
                    margin_mean: eval.margin_mean,
                    margin_std: eval.margin_std,
                    kl_to_target: last.kl_to_target,
                    steps: last.step,
                    status: "ok".into(),
                },
                Err(e) => failed(format!("error: {e}")),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormTrace {
    pub label: String,
    pub norms: Vec<f64>,
    pub status: String,
}

/// Gradient L2 norm per step for each configuration, trained for `steps` updates.
pub fn gradient_norm_trace(configs: &[TrainConfig], target: &Target, steps: usize) -> Vec<NormTrace> {
    configs
        .par_iter()
        .map(|cfg| {
            let label = format!("{}/{}", cfg.h, cfg.ratio.name());
            let cfg = TrainConfig {
                steps: steps.max(1),
                ..cfg.clone()
            };
            match train(&cfg, target, target.reference().clone()) {
                Ok(out) => NormTrace {
                    label,
                    norms: out.reports.iter().map(|r| r.grad_norm).collect(),
                    status: "ok".into(),
                },
                Err(e) => NormTrace {
                    label,
                    norms: Vec::new(),
                    status: format!("error: {e}"),
                },
            }
        })
        .collect()
}

fn csv_err(e: csv::Error) -> BpoError {
    BpoError::Serde(e.to_string())
}

/// One CSV row per step report.
pub fn write_trace_csv<W: io::Write>(reports: &[StepReport], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in reports {
        wtr.serialize(r).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| BpoError::Serde(e.to_string()))
}

/// One CSV row per sweep point.
pub fn write_sweep_csv<W: io::Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| BpoError::Serde(e.to_string()))
}

/// Long-format CSV (`label, step, grad_norm, status`) for gradient-norm traces.
pub fn write_norm_trace_csv<W: io::Write>(traces: &[NormTrace], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["label", "step", "grad_norm", "status"]).map_err(csv_err)?;
    for t in traces {
        for (i, n) in t.norms.iter().enumerate() {
            wtr.write_record([t.label.as_str(), &i.to_string(), &n.to_string(), &t.status]).map_err(csv_err)?;
        }
        if t.norms.is_empty() {
            wtr.write_record([t.label.as_str(), "", "", &t.status]).map_err(csv_err)?;
        }
    }
    wtr.flush().map_err(|e| BpoError::Serde(e.to_string()))
}

/// Human-readable one-line-per-check summary.
pub fn render_reports(reports: &[VerificationReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = writeln!(
            s,
            "{} {:<44} measured {:.3e} (tolerance {:.1e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.measured,
            r.tolerance
        );
        if !r.passed {
            if let Some(w) = &r.worst_input {
                let _ = writeln!(s, "     worst: {w}");
            }
        }
    }
    s
}
