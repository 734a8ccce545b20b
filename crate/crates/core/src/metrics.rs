//! Exact, enumeration-based policy metrics against a target.

use serde::{Deserialize, Serialize};

use crate::error::{BpoError, Result};
use crate::math::sigmoid;
use crate::policy::{kl_from_log_probs, Policy};
use crate::preference::Target;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    /// Prompt-weighted `KL(π_θ ‖ π*)`.
    pub kl_to_target: f64,
    /// Prompt-weighted total variation to `π*`.
    pub tv_to_target: f64,
    pub entropy_mean: f64,
    /// Win-rate proxy of the policy against the reference.
    pub winrate_proxy: f64,
}

fn check_shape(a: &Policy, target: &Target) -> Result<()> {
    if a.spec().same_shape(target.spec()) {
        Ok(())
    } else {
        Err(BpoError::Shape(format!("{:?} vs target {:?}", a.spec(), target.spec())))
    }
}

/// Probability that a draw from `policy` beats a draw from `baseline` under
/// the target's Bradley–Terry preferences, averaged over prompts. Ties count one half.
pub fn winrate_proxy(policy: &Policy, baseline: &Policy, target: &Target) -> Result<f64> {
    check_shape(policy, target)?;
    check_shape(baseline, target)?;
    let mut total = 0.0;
    for (x, &px) in target.prompt_dist().iter().enumerate() {
        total += px * winrate_from_probs(&policy.probs(x)?, &baseline.probs(x)?, target.rewards(x));
    }
    Ok(total)
}

/// `Σ_{y,y′} p(y)·q(y′)·σ(r(y) − r(y′))` for one prompt.
pub fn winrate_from_probs(p: &[f64], q: &[f64], rewards: &[f64]) -> f64 {
    p.iter()
        .zip(rewards)
        .map(|(&pa, &ra)| {
            pa * q
                .iter()
                .zip(rewards)
                .map(|(&qb, &rb)| qb * sigmoid(ra - rb))
                .sum::<f64>()
        })
        .sum()
}

/// Prompt-weighted `KL(p ‖ q)`.
pub fn mean_kl(p: &Policy, q: &Policy, prompt_dist: &[f64]) -> Result<f64> {
    if !p.spec().same_shape(q.spec()) {
        return Err(BpoError::Shape(format!("{:?} vs {:?}", p.spec(), q.spec())));
    }
    let mut total = 0.0;
    for (x, &px) in prompt_dist.iter().enumerate() {
        total += px * kl_from_log_probs(&p.log_probs(x)?, &q.log_probs(x)?);
    }
    Ok(total)
}

pub fn snapshot(policy: &Policy, target: &Target, optimal: &Policy) -> Result<MetricSnapshot> {
    check_shape(policy, target)?;
    let mut s = MetricSnapshot {
        kl_to_target: 0.0,
        tv_to_target: 0.0,
        entropy_mean: 0.0,
        winrate_proxy: 0.0,
    };
    for (x, &px) in target.prompt_dist().iter().enumerate() {
        let lp = policy.log_probs(x)?;
        let lo = optimal.log_probs(x)?;
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        s.kl_to_target += px * kl_from_log_probs(&lp, &lo);
        s.tv_to_target += px * 0.5 * probs.iter().zip(&lo).map(|(p, l)| (p - l.exp()).abs()).sum::<f64>();
        s.entropy_mean -= px * probs.iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
        s.winrate_proxy += px * winrate_from_probs(&probs, &target.reference().probs(x)?, target.rewards(x));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{PolicyKind, PolicySpec};
    use crate::preference::TargetConfig;

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
    fn self_winrate_is_half() {
        let t = target();
        let r = t.reference();
        assert!((winrate_proxy(r, r, &t).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn optimum_beats_reference() {
        let t = target();
        let opt = t.build_optimal_policy().unwrap();
        assert!(winrate_proxy(&opt, t.reference(), &t).unwrap() > 0.5);
        let a = winrate_proxy(&opt, t.reference(), &t).unwrap();
        let b = winrate_proxy(t.reference(), &opt, &t).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_point_mass_is_best_among_point_masses() {
        let t = target();
        let n = t.num_sequences();
        let uniform = vec![1.0 / n as f64; n];
        let rewards = t.rewards(0);
        let scores: Vec<f64> = (0..n)
            .map(|y| {
                let mut p = vec![0.0; n];
                p[y] = 1.0;
                winrate_from_probs(&p, &uniform, rewards)
            })
            .collect();
        let best = (0..n).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        let argmax = (0..n).max_by(|&a, &b| rewards[a].total_cmp(&rewards[b])).unwrap();
        assert_eq!(best, argmax);
    }

    #[test]
    fn snapshot_at_optimum() {
        let t = target();
        let opt = t.build_optimal_policy().unwrap();
        let s = snapshot(&opt, &t, &opt).unwrap();
        assert!(s.kl_to_target.abs() < 1e-15 && s.tv_to_target < 1e-15);
        assert!(s.winrate_proxy > 0.5);
        let u = Policy::uniform(PolicySpec::new(2, 3, 2, PolicyKind::Factorized).unwrap()).unwrap();
        let s = snapshot(&u, &t, &opt).unwrap();
        assert!((s.entropy_mean - 2.0 * 3f64.ln()).abs() < 1e-12);
        assert!(s.kl_to_target > 0.0);
    }
}
