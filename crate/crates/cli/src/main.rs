//! `bpo`: generate synthetic preference targets, train, verify and sweep.
//!
//! Exit codes: 0 success, 1 bad configuration or input, 2 numeric failure
//! (or, for `verify`, a failed check).

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bpo_core::analysis::{self, VerificationSummary};
use bpo_core::trainer::{self, TrainError};
use bpo_core::{Mode, StepReport, Target, TrainConfig, TripleDataset};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{DataSource, ExperimentConfig, StepSize};

#[derive(Parser, Debug)]
#[command(name = "bpo", version, about = "Bregman preference optimization on synthetic targets")]
struct Cli {
    /// TOML experiment config; defaults apply to anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the training seed and the dataset sampling seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the training mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write target.json, exact.json and samples.json.
    Generate,
    /// Train from the reference on the target in the output directory.
    Train,
    /// Run the full verification suite on the target.
    Verify,
    /// Train one SBA run per λ and write sweep.csv.
    Sweep,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Sampled,
}

/// An error that maps to exit code 2 rather than 1.
#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<NumericFailure>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.target.sample_seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.train.mode = match mode {
            ModeArg::Exact => Mode::Exact,
            ModeArg::Sampled => Mode::Sampled,
        };
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    write(&cfg.output_dir.join("config.toml"), &cfg.to_toml()?)?;

    match cli.command {
        Command::Generate => generate(&cfg),
        Command::Train => train(&cfg),
        Command::Verify => verify(&cfg),
        Command::Sweep => sweep(&cfg),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_target(cfg: &ExperimentConfig) -> Result<Target> {
    let path = cfg.output_dir.join("target.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {} (run `bpo generate` first)", path.display()))?;
    Ok(Target::from_json(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn generate(cfg: &ExperimentConfig) -> Result<ExitCode> {
    let target = Target::generate(&cfg.target.target)?;
    let dir = &cfg.output_dir;
    write(&dir.join("target.json"), &target.to_json()?)?;
    write(&dir.join("exact.json"), &target.enumerate_exact()?.to_json()?)?;
    if cfg.target.samples > 0 {
        let samples = target.sample_triples(cfg.target.samples, cfg.target.sample_seed)?;
        write(&dir.join("samples.json"), &samples.to_json()?)?;
    }
    println!(
        "target {}: {} prompts x {} sequences, written to {}",
        analysis::target_digest(&target),
        target.prompt_dist().len(),
        target.num_sequences(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct FinalState<'a> {
    schema_version: u32,
    step_size: f64,
    status: &'a str,
    final_report: Option<&'a StepReport>,
    policy: &'a bpo_core::Policy,
}

fn resolve_step(step: StepSize, cfg: &mut TrainConfig, target: &Target) -> Result<()> {
    if step.is_auto() {
        let exact = target.enumerate_exact()?;
        cfg.step_size = analysis::auto_step_size(cfg, target, &exact).map_err(|e| NumericFailure(format!("automatic step size: {e}")))?;
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig) -> Result<ExitCode> {
    let target = load_target(cfg)?;
    let dir = &cfg.output_dir;
    let mut tc = cfg.train.to_train_config();
    resolve_step(cfg.train.step_size, &mut tc, &target)?;

    let start = target.reference().clone();
    let result = match cfg.train.data {
        DataSource::Target => trainer::train(&tc, &target, start),
        DataSource::Samples => {
            let path = dir.join("samples.json");
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let data = TripleDataset::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
            trainer::train_on_dataset(&tc, &target, &data, start)
        }
    };

    let write_trace = |reports: &[StepReport]| -> Result<()> {
        let mut buf = Vec::new();
        analysis::write_trace_csv(reports, &mut buf)?;
        fs::write(dir.join("trace.csv"), buf).context("writing trace.csv")
    };
    match result {
        Ok(out) => {
            write_trace(&out.reports)?;
            let last = out.reports.last();
            let state = FinalState {
                schema_version: bpo_core::SCHEMA_VERSION,
                step_size: tc.step_size,
                status: "ok",
                final_report: last,
                policy: &out.policy,
            };
            write(&dir.join("final_state.json"), &serde_json::to_string_pretty(&state)?)?;
            if let Some(r) = last {
                println!(
                    "{} steps (eta {:.4e}): loss {:.6e}, |grad| {:.3e}, KL to optimum {:.3e}, winrate {:.4}",
                    r.step, tc.step_size, r.loss, r.grad_norm, r.kl_to_target, r.winrate_proxy
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(TrainError::Setup(e)) => Err(e.into()),
        Err(TrainError::Numeric {
            step,
            detail,
            last_report,
            reports,
        }) => {
            write_trace(&reports)?;
            let failure = serde_json::json!({
                "schema_version": bpo_core::SCHEMA_VERSION,
                "step_size": tc.step_size,
                "status": format!("numeric failure at step {step}: {detail}"),
                "final_report": last_report,
            });
            write(&dir.join("final_state.json"), &serde_json::to_string_pretty(&failure)?)?;
            Err(NumericFailure(format!("training aborted at step {step}: {detail}")).into())
        }
    }
}

fn verify(cfg: &ExperimentConfig) -> Result<ExitCode> {
    let target = load_target(cfg)?;
    let reports = analysis::verify_all(&target, &cfg.verify);
    print!("{}", analysis::render_reports(&reports));
    let summary = VerificationSummary::new(&target, cfg.verify.clone(), reports);
    write(&cfg.output_dir.join("verification.json"), &summary.to_json()?)?;
    let failed = summary.reports.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("all {} checks passed", summary.reports.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{failed} of {} checks failed", summary.reports.len());
        Ok(ExitCode::from(2))
    }
}

fn sweep(cfg: &ExperimentConfig) -> Result<ExitCode> {
    let target = load_target(cfg)?.with_reference_kind(cfg.sweep.kind)?;
    let base = cfg.sweep_base();
    let rows = if cfg.sweep.step_size.is_auto() {
        analysis::lambda_sweep_auto_step(&target, &cfg.sweep.lambdas, &base)?
    } else {
        analysis::lambda_sweep(&target, &cfg.sweep.lambdas, &base)?
    };
    let mut buf = Vec::new();
    analysis::write_sweep_csv(&rows, &mut buf)?;
    fs::write(cfg.output_dir.join("sweep.csv"), buf).context("writing sweep.csv")?;
    for r in &rows {
        println!(
            "lambda {:>6}: winrate {:.4}, entropy {:.4}, margin {:.4} ± {:.4}, KL {:.3e} [{}]",
            r.lambda, r.winrate_proxy, r.entropy_mean, r.margin_mean, r.margin_std, r.kl_to_target, r.status
        );
    }
    if rows.iter().any(|r| r.status == "ok") {
        Ok(ExitCode::SUCCESS)
    } else {
        bail!(NumericFailure("every sweep run failed".into()))
    }
}
