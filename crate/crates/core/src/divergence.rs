//! Bregman generators for ratio matching.
//!
//! A generator `h` is a strictly convex, twice differentiable function on
//! `(0, ∞)`. Every generator induces
//!
//! * a pointwise Bregman divergence
//!   `B_h(a ‖ b) = h(a) − h(b) − h′(b)(a − b)`,
//! * a sample-only loss integrand `h′(R)·R − h(R) − h′(1/R)` whose expectation
//!   under the preference distribution differs from the expected Bregman
//!   divergence by a constant that does not depend on the model,
//! * a gradient weight `G_h(R) = h″(R)·R + h″(1/R)/R²`, the derivative of the
//!   loss integrand, which is positive whenever `h″` is.
//!
//! | kind    | h(R)                                 |
//! |---------|--------------------------------------|
//! | LR      | (R ln R − (1+R) ln(1+R)) / 2         |
//! | KLIEP   | R ln R − R                           |
//! | LSIF    | (R − 1)²                             |
//! | BA(λ)   | (R^{1+λ} − R) / λ                    |
//! | SBA(λ,s)| (R^{1+λ} − R) / (s λ (λ+1))          |
//!
//! The loss integrand is always computed from the definition above, so the
//! LSIF and BA(λ) integrands carry the constants `+1` and `+1/λ` relative to
//! the commonly tabulated closed forms. Only the gradient matters for training.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{BpoError, Result};

/// Ratios are clamped to at least this value before `ln`/`powf`.
pub const RATIO_FLOOR: f64 = 1e-12;

/// Default SBA scale; matches the LR gradient weight at `R = 1`.
pub const DEFAULT_SBA_SCALE: f64 = 4.0;

/// A strictly convex generator evaluated on positive ratios.
///
/// The provided methods assume `r > 0`; use the checked free functions
/// ([`h_value`], [`h_prime`], ...) at API boundaries.
pub trait Generator {
    fn h(&self, r: f64) -> f64;
    fn h_prime(&self, r: f64) -> f64;
    fn h_second(&self, r: f64) -> f64;

    fn loss_integrand(&self, r: f64) -> f64 {
        self.h_prime(r) * r - self.h(r) - self.h_prime(1.0 / r)
    }

    fn grad_magnitude(&self, r: f64) -> f64 {
        self.h_second(r) * r + self.h_second(1.0 / r) / (r * r)
    }

    fn bregman(&self, r_data: f64, r_model: f64) -> f64 {
        self.h(r_data) - self.h(r_model) - self.h_prime(r_model) * (r_data - r_model)
    }
}

/// Generator selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HSpec {
    /// Logistic regression; recovers the DPO loss.
    Lr,
    Kliep,
    Lsif,
    /// Basu's power divergence, `λ > −1`, `λ ≠ 0`.
    Ba { lambda: f64 },
    /// Scaled Basu's power divergence, `λ > −1`, `s > 0`. `λ = 0` is the KLIEP limit scaled by `1/s`.
    Sba {
        lambda: f64,
        #[serde(default = "default_scale")]
        s: f64,
    },
    /// Positive combination `Σ wᵢ hᵢ`.
    Mixture { components: Vec<(f64, HSpec)> },
}

fn default_scale() -> f64 {
    DEFAULT_SBA_SCALE
}

impl HSpec {
    pub fn ba(lambda: f64) -> Self {
        HSpec::Ba { lambda }
    }

    pub fn sba(lambda: f64) -> Self {
        HSpec::Sba {
            lambda,
            s: DEFAULT_SBA_SCALE,
        }
    }

    pub fn sba_scaled(lambda: f64, s: f64) -> Self {
        HSpec::Sba { lambda, s }
    }

    pub fn mixture(components: Vec<(f64, HSpec)>) -> Self {
        HSpec::Mixture { components }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            HSpec::Lr | HSpec::Kliep | HSpec::Lsif => Ok(()),
            HSpec::Ba { lambda } => {
                if !lambda.is_finite() || *lambda <= -1.0 {
                    Err(BpoError::InvalidSpec(format!("BA requires λ > −1, got {lambda}")))
                } else if *lambda == 0.0 {
                    Err(BpoError::InvalidSpec(
                        "BA with λ = 0 has no closed form; use KLIEP or the SBA λ = 0 branch".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            HSpec::Sba { lambda, s } => {
                if !lambda.is_finite() || *lambda <= -1.0 {
                    Err(BpoError::InvalidSpec(format!("SBA requires λ > −1, got {lambda}")))
                } else if !s.is_finite() || *s <= 0.0 {
                    Err(BpoError::InvalidSpec(format!("SBA requires s > 0, got {s}")))
                } else {
                    Ok(())
                }
            }
            HSpec::Mixture { components } => {
                if components.is_empty() {
                    return Err(BpoError::InvalidSpec("mixture has no components".into()));
                }
                for (w, c) in components {
                    if !w.is_finite() || *w <= 0.0 {
                        return Err(BpoError::InvalidSpec(format!(
                            "mixture weights must be positive, got {w}"
                        )));
                    }
                    c.validate()?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for HSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HSpec::Lr => write!(f, "LR"),
            HSpec::Kliep => write!(f, "KLIEP"),
            HSpec::Lsif => write!(f, "LSIF"),
            HSpec::Ba { lambda } => write!(f, "BA({lambda})"),
            HSpec::Sba { lambda, s } => write!(f, "SBA({lambda},{s})"),
            HSpec::Mixture { components } => {
                write!(f, "Mix(")?;
                for (i, (w, c)) in components.iter().enumerate() {
                    if i > 0 {
                        write!(f, "+")?;
                    }
                    write!(f, "{w}*{c}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl Generator for HSpec {
    fn h(&self, r: f64) -> f64 {
        let r = r.max(RATIO_FLOOR);
        match self {
            // r ln r − (1+r) ln(1+r) rewritten as −ln r − (1+r) ln(1 + 1/r)
            HSpec::Lr => 0.5 * (-r.ln() - (1.0 + r) * (1.0 / r).ln_1p()),
            HSpec::Kliep => r * r.ln() - r,
            HSpec::Lsif => (r - 1.0) * (r - 1.0),
            HSpec::Ba { lambda } => (r.powf(1.0 + lambda) - r) / lambda,
            HSpec::Sba { lambda, s } => {
                if *lambda == 0.0 {
                    (r * r.ln() - r) / s
                } else {
                    (r.powf(1.0 + lambda) - r) / (s * lambda * (lambda + 1.0))
                }
            }
            HSpec::Mixture { components } => components.iter().map(|(w, c)| w * c.h(r)).sum(),
        }
    }

    fn h_prime(&self, r: f64) -> f64 {
        let r = r.max(RATIO_FLOOR);
        match self {
            HSpec::Lr => -0.5 * (1.0 / r).ln_1p(),
            HSpec::Kliep => r.ln(),
            HSpec::Lsif => 2.0 * (r - 1.0),
            HSpec::Ba { lambda } => ((1.0 + lambda) * r.powf(*lambda) - 1.0) / lambda,
            HSpec::Sba { lambda, s } => {
                if *lambda == 0.0 {
                    r.ln() / s
                } else {
                    ((1.0 + lambda) * r.powf(*lambda) - 1.0) / (s * lambda * (lambda + 1.0))
                }
            }
            HSpec::Mixture { components } => {
                components.iter().map(|(w, c)| w * c.h_prime(r)).sum()
            }
        }
    }

    fn h_second(&self, r: f64) -> f64 {
        let r = r.max(RATIO_FLOOR);
        match self {
            HSpec::Lr => 0.5 / (r * (1.0 + r)),
            HSpec::Kliep => 1.0 / r,
            HSpec::Lsif => 2.0,
            HSpec::Ba { lambda } => (1.0 + lambda) * r.powf(lambda - 1.0),
            HSpec::Sba { lambda, s } => r.powf(lambda - 1.0) / s,
            HSpec::Mixture { components } => {
                components.iter().map(|(w, c)| w * c.h_second(r)).sum()
            }
        }
    }

    fn loss_integrand(&self, r: f64) -> f64 {
        let r = r.max(RATIO_FLOOR);
        self.h_prime(r) * r - self.h(r) - self.h_prime(1.0 / r)
    }

    fn grad_magnitude(&self, r: f64) -> f64 {
        let r = r.max(RATIO_FLOOR);
        self.h_second(r) * r + self.h_second(1.0 / r) / (r * r)
    }
}

fn check_ratio(op: &'static str, r: f64) -> Result<()> {
    if r.is_finite() && r > 0.0 {
        Ok(())
    } else {
        Err(BpoError::domain(op, format!("ratio must be positive and finite, got {r}")))
    }
}

pub fn h_value(spec: &HSpec, r: f64) -> Result<f64> {
    spec.validate()?;
    check_ratio("h_value", r)?;
    Ok(spec.h(r))
}

pub fn h_prime(spec: &HSpec, r: f64) -> Result<f64> {
    spec.validate()?;
    check_ratio("h_prime", r)?;
    Ok(spec.h_prime(r))
}

pub fn h_second(spec: &HSpec, r: f64) -> Result<f64> {
    spec.validate()?;
    check_ratio("h_second", r)?;
    Ok(spec.h_second(r))
}

pub fn loss_integrand(spec: &HSpec, r: f64) -> Result<f64> {
    spec.validate()?;
    check_ratio("loss_integrand", r)?;
    Ok(spec.loss_integrand(r))
}

pub fn grad_magnitude(spec: &HSpec, r: f64) -> Result<f64> {
    spec.validate()?;
    check_ratio("grad_magnitude", r)?;
    Ok(spec.grad_magnitude(r))
}

pub fn bregman_pointwise(spec: &HSpec, r_data: f64, r_model: f64) -> Result<f64> {
    spec.validate()?;
    check_ratio("bregman_pointwise", r_data)?;
    check_ratio("bregman_pointwise", r_model)?;
    Ok(spec.bregman(r_data, r_model))
}

/// SBA scale `s` that equalizes the SBA and LR gradient weights at `r0`:
/// `s = (r0^λ + r0^{−λ−1})·(1 + r0)`. Equals 4 at `r0 = 1`.
///
/// Ratios that do not start at 1 (e.g. length-normalized, reference-free
/// ratios starting near `e^γ`) use this instead of the default.
pub fn sba_scale_matching_lr(lambda: f64, r0: f64) -> f64 {
    (r0.powf(lambda) + r0.powf(-lambda - 1.0)) * (1.0 + r0)
}
