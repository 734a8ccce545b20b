//! Acceptance suite: ten criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test -p bpo-core --test acceptance -- --nocapture` to see the lines.

use std::time::{Duration, Instant};

use bpo_core::analysis::{self, Tolerances, VerificationReport};
use bpo_core::{HSpec, Mode, Optimizer, PolicyKind, RatioSpec, Target, TargetConfig, TrainConfig};

struct Outcome {
    passed: bool,
    summary: String,
}

fn from_reports(reports: &[VerificationReport]) -> Outcome {
    let passed = !reports.is_empty() && reports.iter().all(|r| r.passed);
    let summary = reports
        .iter()
        .map(|r| {
            let mut s = format!("{}={:.2e}/{:.0e}", r.name, r.measured, r.tolerance);
            if !r.passed {
                s.push_str(&format!(" FAILED ({})", r.worst_input.as_deref().unwrap_or("-")));
            }
            s
        })
        .collect::<Vec<_>>()
        .join("; ");
    Outcome { passed, summary }
}

fn default_target() -> Target {
    Target::generate(&TargetConfig::default()).expect("default target")
}

fn criterion_1(tol: &Tolerances) -> Outcome {
    let states = analysis::random_states(100, tol.seed).unwrap();
    from_reports(&[analysis::check_dpo_recovery(&states, 1e-12)])
}

fn criterion_2(tol: &Tolerances) -> Outcome {
    let states = analysis::random_states(100, tol.seed).unwrap();
    from_reports(&analysis::check_fdpo_recovery(&states, 1e-12))
}

fn criterion_3(tol: &Tolerances) -> Outcome {
    let states = analysis::random_states(100, tol.seed).unwrap();
    from_reports(&[analysis::check_fpo_collapse(&states, 1e-10)])
}

fn criterion_4(tol: &Tolerances) -> Outcome {
    let states = analysis::random_states(20, tol.seed).unwrap();
    let mut reports = analysis::check_gradients(&states, 1e-5);
    for h in analysis::generator_registry() {
        reports.push(analysis::check_positivity(&h.to_string(), &h));
    }
    let (grads, positivity) = reports.split_at(3);
    let all = from_reports(&reports);
    Outcome {
        passed: all.passed,
        summary: format!(
            "{}; positivity over {} generators {}",
            from_reports(grads).summary,
            positivity.len(),
            if from_reports(positivity).passed { "ok" } else { "FAILED" }
        ),
    }
}

fn criterion_5(target: &Target, tol: &Tolerances) -> Outcome {
    let exact = target.enumerate_exact().unwrap();
    let reports: Vec<_> = analysis::optimality_registry()
        .iter()
        .map(|h| analysis::check_constant_offset(target, &exact, h, 10, tol.seed, 1e-8))
        .collect();
    from_reports(&reports)
}

fn criterion_6(target: &Target, tol: &Tolerances) -> Outcome {
    let exact = target.enumerate_exact().unwrap();
    let tol = Tolerances {
        optimum_kl: 1e-6,
        optimum_ratio_rel: 1e-3,
        pairwise_kl: 1e-5,
        ..tol.clone()
    };
    from_reports(&analysis::check_optimality(target, &exact, &analysis::optimality_registry(), &tol))
}

fn criterion_7(target: &Target) -> Outcome {
    let exact = target.enumerate_exact().unwrap();
    from_reports(&analysis::check_optimal_ratio(target, &exact, 1e-10))
}

fn criterion_8(target: &Target, tol: &Tolerances) -> Outcome {
    let mut reports = vec![analysis::check_sba_unit_weight()];
    let amp = analysis::check_norm_amplification(target, &Tolerances { norm_ratio_rel: 1e-6, ..tol.clone() });
    reports.extend(amp.into_iter().filter(|r| r.name.starts_with("step0")));
    from_reports(&reports)
}

fn criterion_9(target: &Target, tol: &Tolerances) -> Outcome {
    let exact = target.enumerate_exact().unwrap();
    let sampled = analysis::check_sampled_loss(target, &exact, 100_000, tol.seed, 3.0);

    let mut cfg = TrainConfig::new(HSpec::sba(1.0), RatioSpec::Dpo { beta: target.beta() });
    cfg.mode = Mode::Sampled;
    cfg.optimizer = Optimizer::AdaptiveRms { decay: 0.99, epsilon: 1e-8 };
    cfg.step_size = 0.02;
    cfg.steps = 200;
    cfg.seed = 11;
    let csv = || {
        let out = bpo_core::trainer::train(&cfg, target, target.reference().clone()).unwrap();
        let mut buf = Vec::new();
        analysis::write_trace_csv(&out.reports, &mut buf).unwrap();
        buf
    };
    let (a, b) = (csv(), csv());
    let identical = a == b && !a.is_empty();
    let mut out = from_reports(&[sampled]);
    out.passed &= identical;
    out.summary.push_str(&format!("; replay CSV {} ({} bytes)", if identical { "identical" } else { "DIFFERS" }, a.len()));
    out
}

fn criterion_10(target: &Target) -> Outcome {
    let factorized = target.with_reference_kind(PolicyKind::Factorized).unwrap();
    let mut base = TrainConfig::new(HSpec::sba(1.0), RatioSpec::Dpo { beta: factorized.beta() });
    base.mode = Mode::Sampled;
    base.optimizer = Optimizer::AdaptiveRms { decay: 0.99, epsilon: 1e-8 };
    base.step_size = 0.02;
    base.steps = 1000;
    let lambdas = [-0.5, 0.0, 0.5, 1.0, 1.5, 2.0];
    let rows = match analysis::lambda_sweep(&factorized, &lambdas, &base) {
        Ok(r) => r,
        Err(e) => {
            return Outcome {
                passed: false,
                summary: e.to_string(),
            }
        }
    };
    let mut buf = Vec::new();
    analysis::write_sweep_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let header = text.lines().next().unwrap_or("");
    let columns = ["winrate_proxy", "entropy_mean", "margin_mean", "margin_std", "kl_to_target"];
    let has_columns = columns.iter().all(|c| header.split(',').any(|h| h == *c));
    let complete = rows.len() == lambdas.len()
        && rows.iter().all(|r| {
            r.status == "ok"
                && [r.winrate_proxy, r.entropy_mean, r.margin_mean, r.margin_std, r.kl_to_target]
                    .iter()
                    .all(|v| v.is_finite())
        });
    let stds: Vec<f64> = rows.iter().map(|r| r.margin_std).collect();
    let spread = stds.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - stds.iter().cloned().fold(f64::INFINITY, f64::min);
    let trend = |f: fn(&analysis::SweepRow) -> f64| {
        let (a, b) = (f(&rows[0]), f(&rows[rows.len() - 1]));
        if b > a {
            "up"
        } else if b < a {
            "down"
        } else {
            "flat"
        }
    };
    Outcome {
        passed: complete && has_columns && spread > 0.0,
        summary: format!(
            "{} rows, columns {}, margin_std spread {spread:.3e}; trends over lambda: winrate {}, entropy {}, margin_std {}",
            rows.len(),
            if has_columns { "present" } else { "MISSING" },
            trend(|r| r.winrate_proxy),
            trend(|r| r.entropy_mean),
            trend(|r| r.margin_std),
        ),
    }
}

#[test]
fn acceptance_criteria() {
    let tol = Tolerances::default();
    let target = default_target();
    type Run<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Duration, Run)> = vec![
        ("1 DPO recovery", Duration::from_secs(1), Box::new(|| criterion_1(&tol))),
        ("2 f-DPO recovery", Duration::from_secs(1), Box::new(|| criterion_2(&tol))),
        ("3 f-PO/FKL collapse", Duration::from_secs(1), Box::new(|| criterion_3(&tol))),
        ("4 gradient checks", Duration::from_secs(30), Box::new(|| criterion_4(&tol))),
        ("5 constant offset", Duration::from_secs(10), Box::new(|| criterion_5(&target, &tol))),
        ("6 optimality", Duration::from_secs(300), Box::new(|| criterion_6(&target, &tol))),
        ("7 optimal-ratio identities", Duration::from_secs(1), Box::new(|| criterion_7(&target))),
        ("8 SBA scaling", Duration::from_secs(5), Box::new(|| criterion_8(&target, &tol))),
        ("9 sampled mode", Duration::from_secs(30), Box::new(|| criterion_9(&target, &tol))),
        ("10 capacity-limited sweep", Duration::from_secs(600), Box::new(|| criterion_10(&target))),
    ];
    let mut failures = Vec::new();
    for (name, budget, run) in &criteria {
        let start = Instant::now();
        let out = run();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= *budget;
        let passed = out.passed && in_budget;
        println!(
            "[{}] criterion {name} ({:.2?}, budget {:?}): {}",
            if passed { "PASS" } else { "FAIL" },
            elapsed,
            budget,
            out.summary
        );
        if !passed {
            failures.push(name.to_string());
        }
    }
    assert!(failures.is_empty(), "failing criteria: {failures:?}");
}
