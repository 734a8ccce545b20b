//! Model-ratio parameterizations `log R_θ` of a preference triple.
//!
//! All arithmetic stays in log space; callers exponentiate only after
//! deciding on clipping.
//!
//! * DPO:   `log R = β[(lp_l − lr_l) − (lp_w − lr_w)]`
//! * f-DPO: `log R = −β f′(u_w) + β f′(u_l)`, `u = π_θ/π_ref`
//! * f-PO:  `log R = ln(exp(f(M)) − 1)`, `M = σ(−log R_DPO)`
//! * SimPO: `log R = −(β/|y_w|) lp_w + (β/|y_l|) lp_l + γ`

use serde::{Deserialize, Serialize};

use crate::error::{BpoError, Result};
use crate::math::{sigmoid, softplus};

/// Convex `f` with `f(1) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FSpec {
    /// Reverse KL, `u ln u`.
    Rkl,
    /// Forward KL, `−ln u`.
    Fkl,
    /// Jensen–Shannon, `u ln u − (1+u) ln((1+u)/2)`.
    Js,
    /// α-divergence, `α ∈ (0, 1)`.
    Alpha { alpha: f64 },
    /// Pearson χ², `(u − 1)²`.
    ChiSq,
    /// Jeffrey, `(u − 1) ln u`.
    Jeffrey,
}

impl FSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            FSpec::Alpha { alpha } if !(*alpha > 0.0 && *alpha < 1.0) => Err(
                BpoError::InvalidSpec(format!("alpha-divergence needs α in (0,1), got {alpha}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            FSpec::Rkl => "RKL".into(),
            FSpec::Fkl => "FKL".into(),
            FSpec::Js => "JS".into(),
            FSpec::Alpha { alpha } => format!("Alpha({alpha})"),
            FSpec::ChiSq => "ChiSq".into(),
            FSpec::Jeffrey => "Jeffrey".into(),
        }
    }

    fn value(&self, u: f64) -> f64 {
        match *self {
            FSpec::Rkl => u * u.ln(),
            FSpec::Fkl => -u.ln(),
            FSpec::Js => u * u.ln() - (1.0 + u) * ((1.0 + u) / 2.0).ln(),
            FSpec::Alpha { alpha } => {
                (u.powf(1.0 - alpha) - (1.0 - alpha) * u - alpha) / (alpha * (alpha - 1.0))
            }
            FSpec::ChiSq => (u - 1.0) * (u - 1.0),
            FSpec::Jeffrey => (u - 1.0) * u.ln(),
        }
    }

    /// `f′(u)` evaluated from `d = ln u`.
    fn prime_at_log(&self, d: f64) -> f64 {
        match *self {
            FSpec::Rkl => d + 1.0,
            FSpec::Fkl => -(-d).exp(),
            FSpec::Js => std::f64::consts::LN_2 - softplus(-d),
            FSpec::Alpha { alpha } => -(-alpha * d).exp_m1() / alpha,
            FSpec::ChiSq => 2.0 * d.exp_m1(),
            FSpec::Jeffrey => d + 1.0 - (-d).exp(),
        }
    }

    /// `u·f″(u)` evaluated from `d = ln u`.
    fn u_second_at_log(&self, d: f64) -> f64 {
        match *self {
            FSpec::Rkl => 1.0,
            FSpec::Fkl => (-d).exp(),
            FSpec::Js => sigmoid(-d),
            FSpec::Alpha { alpha } => (-alpha * d).exp(),
            FSpec::ChiSq => 2.0 * d.exp(),
            FSpec::Jeffrey => 1.0 + (-d).exp(),
        }
    }

    /// Allowed inside the f-DPO ratio (`f′` invertible, no Jeffrey).
    pub fn supports_fdpo(&self) -> bool {
        !matches!(self, FSpec::Jeffrey)
    }

    /// Allowed inside the f-PO ratio (`f > 0` on `(0, 1)`).
    pub fn supports_fpo(&self) -> bool {
        matches!(self, FSpec::Fkl | FSpec::Js | FSpec::Jeffrey)
    }
}

fn check_positive(op: &'static str, u: f64) -> Result<()> {
    if u.is_finite() && u > 0.0 {
        Ok(())
    } else {
        Err(BpoError::domain(op, format!("argument must be positive and finite, got {u}")))
    }
}

pub fn f_value(f: &FSpec, u: f64) -> Result<f64> {
    f.validate()?;
    check_positive("f_value", u)?;
    Ok(f.value(u))
}

pub fn f_prime(f: &FSpec, u: f64) -> Result<f64> {
    f.validate()?;
    check_positive("f_prime", u)?;
    Ok(f.prime_at_log(u.ln()))
}

pub fn f_second(f: &FSpec, u: f64) -> Result<f64> {
    f.validate()?;
    check_positive("f_second", u)?;
    Ok(f.u_second_at_log(u.ln()) / u)
}

/// Log-probabilities of one triple under the policy and the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripleLogProbs {
    pub lp_w: f64,
    pub lp_l: f64,
    pub lr_w: f64,
    pub lr_l: f64,
    pub len_w: usize,
    pub len_l: usize,
}

impl TripleLogProbs {
    /// Same triple with winner and loser exchanged.
    pub fn swapped(&self) -> Self {
        TripleLogProbs {
            lp_w: self.lp_l,
            lp_l: self.lp_w,
            lr_w: self.lr_l,
            lr_l: self.lr_w,
            len_w: self.len_l,
            len_l: self.len_w,
        }
    }

    fn check(&self) -> Result<()> {
        let vals = [self.lp_w, self.lp_l, self.lr_w, self.lr_l];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(BpoError::domain("log_model_ratio", format!("non-finite log-probabilities {vals:?}")));
        }
        if self.len_w == 0 || self.len_l == 0 {
            return Err(BpoError::domain("log_model_ratio", "response lengths must be positive"));
        }
        Ok(())
    }

    /// DPO reward margin `β[(lp_w − lr_w) − (lp_l − lr_l)] = −log R_DPO`.
    pub fn margin(&self, beta: f64) -> f64 {
        beta * ((self.lp_w - self.lr_w) - (self.lp_l - self.lr_l))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RatioSpec {
    Dpo { beta: f64 },
    FDpo { beta: f64, f: FSpec },
    FPo { beta: f64, f: FSpec },
    SimPo { beta: f64, gamma: f64 },
}

impl RatioSpec {
    pub fn beta(&self) -> f64 {
        match *self {
            RatioSpec::Dpo { beta }
            | RatioSpec::FDpo { beta, .. }
            | RatioSpec::FPo { beta, .. }
            | RatioSpec::SimPo { beta, .. } => beta,
        }
    }

    pub fn name(&self) -> String {
        match self {
            RatioSpec::Dpo { .. } => "DPO".into(),
            RatioSpec::FDpo { f, .. } => format!("fDPO[{}]", f.name()),
            RatioSpec::FPo { f, .. } => format!("fPO[{}]", f.name()),
            RatioSpec::SimPo { gamma, .. } => format!("SimPO[γ={gamma}]"),
        }
    }

    /// `log R` when policy equals reference (and, for SimPO, equal per-token log-probs).
    pub fn initial_log_ratio(&self) -> f64 {
        match self {
            RatioSpec::SimPo { gamma, .. } => *gamma,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let beta = self.beta();
        if !beta.is_finite() || beta <= 0.0 {
            return Err(BpoError::InvalidSpec(format!("β must be positive, got {beta}")));
        }
        match self {
            RatioSpec::FDpo { f, .. } => {
                f.validate()?;
                if !f.supports_fdpo() {
                    return Err(BpoError::InvalidSpec(format!(
                        "{} is not available for the f-DPO ratio",
                        f.name()
                    )));
                }
            }
            RatioSpec::FPo { f, .. } => {
                f.validate()?;
                if !f.supports_fpo() {
                    return Err(BpoError::InvalidSpec(format!(
                        "{} is not strictly positive on (0,1); f-PO needs FKL, JS or Jeffrey",
                        f.name()
                    )));
                }
            }
            RatioSpec::SimPo { gamma, .. } if !gamma.is_finite() => {
                return Err(BpoError::InvalidSpec("γ must be finite".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// `log R_θ` for one triple. Assumes a validated spec.
    pub fn log_ratio(&self, t: &TripleLogProbs) -> Result<f64> {
        t.check()?;
        let v = match *self {
            RatioSpec::Dpo { beta } => -t.margin(beta),
            RatioSpec::FDpo { beta, f } => {
                -beta * f.prime_at_log(t.lp_w - t.lr_w) + beta * f.prime_at_log(t.lp_l - t.lr_l)
            }
            RatioSpec::FPo { beta, f } => ln_expm1_of_log(fpo_log_f(f, t.margin(beta))?),
            RatioSpec::SimPo { beta, gamma } => {
                -beta / t.len_w as f64 * t.lp_w + beta / t.len_l as f64 * t.lp_l + gamma
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(BpoError::NonFinite(format!("log ratio for {t:?}")))
        }
    }

    /// Partial derivatives `(∂ log R/∂ lp_w, ∂ log R/∂ lp_l)`.
    pub fn log_ratio_partials(&self, t: &TripleLogProbs) -> Result<(f64, f64)> {
        t.check()?;
        let p = match *self {
            RatioSpec::Dpo { beta } => (-beta, beta),
            RatioSpec::FDpo { beta, f } => (
                -beta * f.u_second_at_log(t.lp_w - t.lr_w),
                beta * f.u_second_at_log(t.lp_l - t.lr_l),
            ),
            RatioSpec::FPo { beta, f } => {
                let m = t.margin(beta);
                let log_f = fpo_log_f(f, m)?;
                let dfm = fpo_dfm_dm(f, m);
                if dfm == 0.0 || !dfm.is_normal() {
                    return Err(BpoError::domain("log_model_ratio", format!("f-PO derivative underflows at margin {m}")));
                }
                // d log R/d m = f′(M)·M(1−M) / (1 − e^{−f(M)}), the denominator in log form.
                let fm = log_f.exp();
                let log_den = if log_f < -20.0 { log_f - 0.5 * fm } else { (-(-fm).exp_m1()).ln() };
                let dlogr_dm = dfm.signum() * (dfm.abs().ln() - log_den).exp();
                (beta * dlogr_dm, -beta * dlogr_dm)
            }
            RatioSpec::SimPo { beta, .. } => (-beta / t.len_w as f64, beta / t.len_l as f64),
        };
        if p.0.is_finite() && p.1.is_finite() {
            Ok(p)
        } else {
            Err(BpoError::NonFinite(format!("log-ratio partials for {t:?}")))
        }
    }
}

/// Taylor coefficients of JS `f(1 − ε)` from `ε²` upward.
const JS_SERIES: [f64; 8] = [
    1.0 / 4.0,
    1.0 / 8.0,
    7.0 / 96.0,
    3.0 / 64.0,
    31.0 / 960.0,
    3.0 / 128.0,
    127.0 / 7168.0,
    85.0 / 6144.0,
];

/// `ln f(σ(m))`, evaluated so that it stays accurate as `σ(m) → 1`.
fn fpo_log_f(f: FSpec, m: f64) -> Result<f64> {
    let log_sp_neg = |m: f64| {
        // ln softplus(−m)
        if m > 30.0 {
            -m + (-0.5 * (-m).exp()).ln_1p()
        } else {
            softplus(-m).ln()
        }
    };
    let v = match f {
        FSpec::Fkl => log_sp_neg(m),
        FSpec::Jeffrey => -softplus(m) + log_sp_neg(m),
        FSpec::Js if m > 4.6 => {
            // ε = 1 − σ(m) < 0.01
            let eps = sigmoid(-m);
            let tail = JS_SERIES.iter().rev().fold(0.0, |acc, c| acc * eps + c) / JS_SERIES[0];
            -2.0 * softplus(m) + JS_SERIES[0].ln() + tail.ln()
        }
        _ => f.value(sigmoid(m)).ln(),
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(BpoError::domain("log_model_ratio", format!("f-PO requires f(σ(m)) > 0, margin {m}")))
    }
}

/// `d f(σ(m)) / dm = f′(M)·M·(1 − M)`.
fn fpo_dfm_dm(f: FSpec, m: f64) -> f64 {
    let (pos, neg) = (sigmoid(m), sigmoid(-m));
    match f {
        FSpec::Fkl => -neg,
        // f′(σ(m)) = −ln(1 + e^{−m}/2)
        FSpec::Js if m >= 0.0 => -(0.5 * (-m).exp()).ln_1p() * pos * neg,
        FSpec::Js => (m - (0.5 + m.exp()).ln()) * pos * neg,
        _ => f.prime_at_log(-softplus(-m)) * pos * neg,
    }
}

/// `ln(e^f − 1)` given `ln f`.
fn ln_expm1_of_log(log_f: f64) -> f64 {
    if log_f < -20.0 {
        // e^f − 1 = f·(1 + f/2 + …)
        log_f + 0.5 * log_f.exp()
    } else {
        let x = log_f.exp();
        if x > 30.0 {
            x + (-(-x).exp()).ln_1p()
        } else {
            x.exp_m1().ln()
        }
    }
}

/// Checked `log R_θ` from the raw per-triple quantities.
pub fn log_model_ratio(
    spec: &RatioSpec,
    lp_w: f64,
    lp_l: f64,
    lr_w: f64,
    lr_l: f64,
    len_w: usize,
    len_l: usize,
) -> Result<f64> {
    spec.validate()?;
    spec.log_ratio(&TripleLogProbs {
        lp_w,
        lp_l,
        lr_w,
        lr_l,
        len_w,
        len_l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    const ALL_F: [FSpec; 6] = [
        FSpec::Rkl,
        FSpec::Fkl,
        FSpec::Js,
        FSpec::Alpha { alpha: 0.3 },
        FSpec::ChiSq,
        FSpec::Jeffrey,
    ];

    fn fd(f: impl Fn(f64) -> f64, u: f64) -> f64 {
        let d = 1e-5 * u;
        (f(u + d) - f(u - d)) / (2.0 * d)
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-10
    }

    #[test]
    fn f_value_examples() {
        for f in ALL_F {
            assert!(f_value(&f, 1.0).unwrap().abs() < 1e-15, "{}", f.name());
        }
        assert!((f_value(&FSpec::Fkl, 0.5).unwrap() - LN_2).abs() < 1e-15);
        assert!((f_value(&FSpec::Jeffrey, 2.0).unwrap() - LN_2).abs() < 1e-15);
        assert!(f_value(&FSpec::Fkl, 0.0).is_err());
        assert!(f_value(&FSpec::Alpha { alpha: 1.5 }, 1.0).is_err());
    }

    #[test]
    fn f_prime_examples() {
        assert_eq!(f_prime(&FSpec::Rkl, 1.0).unwrap(), 1.0);
        assert_eq!(f_prime(&FSpec::ChiSq, 1.0).unwrap(), 0.0);
        assert!(f_prime(&FSpec::Js, 1.0).unwrap().abs() < 1e-15);
        assert!(fd(|u| FSpec::Js.value(u), 1.0).abs() < 1e-9);
    }

    #[test]
    fn f_derivatives_match_finite_differences() {
        for f in ALL_F {
            for &u in &[0.01, 0.2, 0.9, 1.0, 1.7, 5.0, 80.0] {
                let p = f_prime(&f, u).unwrap();
                assert!(close(p, fd(|x| f.value(x), u), 1e-6), "{} f' at {u}", f.name());
                let s = f_second(&f, u).unwrap();
                assert!(close(s, fd(|x| f.prime_at_log(x.ln()), u), 1e-6), "{} f'' at {u}", f.name());
            }
        }
    }

    #[test]
    fn fpo_family_positive_below_one() {
        for f in ALL_F.iter().filter(|f| f.supports_fpo()) {
            for &u in &[1e-6, 0.01, 0.3, 0.999] {
                assert!(f.value(u) > 0.0, "{} at {u}", f.name());
            }
        }
        assert!(FSpec::Rkl.value(0.5) < 0.0);
    }

    #[test]
    fn initialization_identities() {
        let dpo = RatioSpec::Dpo { beta: 0.1 };
        assert_eq!(log_model_ratio(&dpo, -2.0, -3.0, -2.0, -3.0, 3, 3).unwrap(), 0.0);

        let simpo = RatioSpec::SimPo { beta: 2.0, gamma: 0.5 };
        let v = log_model_ratio(&simpo, -3.0, -6.0, -1.0, -1.0, 3, 6).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fpo_fkl_equals_dpo_examples() {
        let dpo = RatioSpec::Dpo { beta: 0.5 };
        let fpo = RatioSpec::FPo { beta: 0.5, f: FSpec::Fkl };
        for (a, b, c, d) in [(-1.0, -2.0, -1.5, -1.5), (-4.0, -0.3, -2.0, -2.5), (-30.0, -1.0, -2.0, -2.0)] {
            let x = log_model_ratio(&dpo, a, b, c, d, 1, 1).unwrap();
            let y = log_model_ratio(&fpo, a, b, c, d, 1, 1).unwrap();
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn invalid_ratio_specs() {
        assert!(RatioSpec::Dpo { beta: 0.0 }.validate().is_err());
        assert!(RatioSpec::FDpo { beta: 0.1, f: FSpec::Jeffrey }.validate().is_err());
        assert!(RatioSpec::FPo { beta: 0.1, f: FSpec::Rkl }.validate().is_err());
        assert!(RatioSpec::FPo { beta: 0.1, f: FSpec::ChiSq }.validate().is_err());
        let dpo = RatioSpec::Dpo { beta: 0.1 };
        assert!(log_model_ratio(&dpo, f64::NAN, 0.0, 0.0, 0.0, 1, 1).is_err());
        assert!(log_model_ratio(&dpo, 0.0, 0.0, 0.0, 0.0, 0, 1).is_err());
    }

    #[test]
    fn fpo_nonpositive_f_is_a_domain_error() {
        // The value stays in log space, but d f(σ(m))/dm underflows at m = 800.
        let fpo = RatioSpec::FPo { beta: 1.0, f: FSpec::Fkl };
        let t = TripleLogProbs { lp_w: 0.0, lp_l: -800.0, lr_w: 0.0, lr_l: 0.0, len_w: 1, len_l: 1 };
        assert!((fpo.log_ratio(&t).unwrap() + 800.0).abs() < 1e-12);
        let r = fpo.log_ratio_partials(&t);
        assert!(matches!(r, Err(BpoError::Domain { .. })), "{r:?}");
        // JS keeps full relative accuracy deep in the saturated regime.
        let js = RatioSpec::FPo { beta: 1.0, f: FSpec::Js };
        let t = TripleLogProbs { lp_l: -100.0, ..t };
        assert!((js.log_ratio(&t).unwrap() - (-200.0 - 4f64.ln())).abs() < 1e-9);
    }

    fn specs() -> Vec<RatioSpec> {
        let beta = 0.7;
        let mut v = vec![RatioSpec::Dpo { beta }, RatioSpec::SimPo { beta, gamma: 0.4 }];
        for f in ALL_F {
            if f.supports_fdpo() {
                v.push(RatioSpec::FDpo { beta, f });
            }
            if f.supports_fpo() {
                v.push(RatioSpec::FPo { beta, f });
            }
        }
        v
    }

    proptest! {
        #[test]
        fn fdpo_rkl_collapses_to_dpo(
            a in -8.0f64..0.0, b in -8.0f64..0.0, c in -8.0f64..0.0, d in -8.0f64..0.0, beta in 0.01f64..3.0,
        ) {
            let x = log_model_ratio(&RatioSpec::Dpo { beta }, a, b, c, d, 2, 2).unwrap();
            let y = log_model_ratio(&RatioSpec::FDpo { beta, f: FSpec::Rkl }, a, b, c, d, 2, 2).unwrap();
            prop_assert!((x - y).abs() <= 1e-12);
        }

        #[test]
        fn swap_antisymmetry(
            a in -8.0f64..0.0, b in -8.0f64..0.0, c in -8.0f64..0.0, d in -8.0f64..0.0,
            lw in 1usize..6, ll in 1usize..6,
        ) {
            let t = TripleLogProbs { lp_w: a, lp_l: b, lr_w: c, lr_l: d, len_w: lw, len_l: ll };
            for spec in specs() {
                let fwd = spec.log_ratio(&t).unwrap();
                let bwd = spec.log_ratio(&t.swapped()).unwrap();
                match spec {
                    RatioSpec::Dpo { .. } | RatioSpec::FDpo { .. } => prop_assert!((fwd + bwd).abs() <= 1e-12),
                    RatioSpec::SimPo { gamma, .. } => prop_assert!((fwd + bwd - 2.0 * gamma).abs() <= 1e-12),
                    RatioSpec::FPo { .. } => {}
                }
            }
        }

        #[test]
        fn dpo_monotone_in_margins(a in -8.0f64..0.0, b in -8.0f64..0.0, c in -8.0f64..0.0, d in -8.0f64..0.0, step in 0.01f64..1.0) {
            let spec = RatioSpec::Dpo { beta: 0.3 };
            let base = log_model_ratio(&spec, a, b, c, d, 1, 1).unwrap();
            prop_assert!(log_model_ratio(&spec, a + step, b, c, d, 1, 1).unwrap() < base);
            prop_assert!(log_model_ratio(&spec, a, b + step, c, d, 1, 1).unwrap() > base);
        }

        #[test]
        fn f_midpoint_convexity(la in -5.0f64..5.0, lb in -5.0f64..5.0, idx in 0usize..6) {
            let f = ALL_F[idx];
            let (a, b) = (la.exp(), lb.exp());
            let mid = f.value(0.5 * (a + b));
            let avg = 0.5 * (f.value(a) + f.value(b));
            prop_assert!(mid <= avg + 1e-12 * (1.0 + avg.abs()));
        }

        #[test]
        fn partials_match_finite_differences(
            a in -6.0f64..-0.1, b in -6.0f64..-0.1, c in -6.0f64..-0.1, d in -6.0f64..-0.1,
        ) {
            let t = TripleLogProbs { lp_w: a, lp_l: b, lr_w: c, lr_l: d, len_w: 3, len_l: 2 };
            let eps = 1e-6;
            for spec in specs() {
                let (pw, pl) = spec.log_ratio_partials(&t).unwrap();
                let bump = |dw: f64, dl: f64| {
                    spec.log_ratio(&TripleLogProbs { lp_w: a + dw, lp_l: b + dl, ..t }).unwrap()
                };
                let fw = (bump(eps, 0.0) - bump(-eps, 0.0)) / (2.0 * eps);
                let fl = (bump(0.0, eps) - bump(0.0, -eps)) / (2.0 * eps);
                prop_assert!((pw - fw).abs() <= 1e-6 * (1.0 + pw.abs()), "{} w: {pw} vs {fw}", spec.name());
                prop_assert!((pl - fl).abs() <= 1e-6 * (1.0 + pl.abs()), "{} l: {pl} vs {fl}", spec.name());
            }
        }
    }
}
