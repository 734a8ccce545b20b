//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bpo_core::analysis::Tolerances;
use bpo_core::{HSpec, Mode, Optimizer, PolicyKind, RatioSpec, TargetConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// A fixed step size, or `"auto"` for `1 / λ_max` of the exact loss Hessian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSize {
    Fixed(f64),
    Named(AutoStep),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoStep {
    Auto,
}

impl StepSize {
    pub fn is_auto(&self) -> bool {
        matches!(self, StepSize::Named(AutoStep::Auto))
    }

    /// Placeholder used for validation before the automatic value is known.
    fn provisional(&self) -> f64 {
        match *self {
            StepSize::Fixed(v) => v,
            StepSize::Named(AutoStep::Auto) => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Draw from (or enumerate) the target distribution.
    Target,
    /// Use the sampled dataset written by `generate`.
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetSection {
    #[serde(flatten)]
    pub target: TargetConfig,
    /// Size of the sampled dataset written by `generate` (0 = none).
    pub samples: usize,
    pub sample_seed: u64,
}

impl Default for TargetSection {
    fn default() -> Self {
        TargetSection {
            target: TargetConfig::default(),
            samples: 10_000,
            sample_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub h: HSpec,
    pub ratio: RatioSpec,
    pub clip_lo: Option<f64>,
    pub clip_hi: Option<f64>,
    pub step_size: StepSize,
    pub batch_size: usize,
    pub steps: usize,
    pub mode: Mode,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub stop_grad_norm: Option<f64>,
    pub data: DataSource,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            h: HSpec::Lr,
            ratio: RatioSpec::Dpo { beta: 0.1 },
            clip_lo: None,
            clip_hi: None,
            step_size: StepSize::Named(AutoStep::Auto),
            batch_size: 64,
            steps: 5000,
            mode: Mode::Exact,
            seed: 0,
            optimizer: Optimizer::GradientDescent,
            stop_grad_norm: Some(1e-12),
            data: DataSource::Target,
        }
    }
}

impl TrainSection {
    /// The trainer configuration, with `step_size` left provisional when automatic.
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            h: self.h.clone(),
            ratio: self.ratio.clone(),
            clip_lo: self.clip_lo,
            clip_hi: self.clip_hi,
            step_size: self.step_size.provisional(),
            batch_size: self.batch_size,
            steps: self.steps,
            mode: self.mode,
            seed: self.seed,
            optimizer: self.optimizer,
            stop_grad_norm: self.stop_grad_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
    /// SBA scale shared by every sweep point.
    pub s: f64,
    pub kind: PolicyKind,
    pub mode: Mode,
    pub optimizer: Optimizer,
    pub step_size: StepSize,
    pub steps: usize,
    pub batch_size: usize,
    pub stop_grad_norm: Option<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            lambdas: vec![-0.5, 0.0, 0.5, 1.0, 1.5, 2.0],
            s: bpo_core::DEFAULT_SBA_SCALE,
            kind: PolicyKind::Factorized,
            mode: Mode::Sampled,
            optimizer: Optimizer::AdaptiveRms {
                decay: 0.99,
                epsilon: 1e-8,
            },
            step_size: StepSize::Fixed(0.02),
            steps: 1000,
            batch_size: 64,
            stop_grad_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub target: TargetSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub verify: Tolerances,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs/default"),
            target: TargetSection::default(),
            train: TrainSection::default(),
            sweep: SweepSection::default(),
            verify: Tolerances::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Check every section up front so that bad settings fail before any work.
    pub fn validate(&self) -> Result<()> {
        let t = &self.target.target;
        bpo_core::PolicySpec::new(t.prompts, t.vocab, t.length, t.kind).context("target section")?;
        if !(t.beta.is_finite() && t.beta > 0.0) {
            bail!("target section: beta must be positive, got {}", t.beta);
        }
        self.train.to_train_config().validate().context("train section")?;
        if let StepSize::Fixed(v) = self.train.step_size {
            if !(v.is_finite() && v > 0.0) {
                bail!("train section: step_size must be positive or \"auto\", got {v}");
            }
        }
        if self.sweep.lambdas.is_empty() {
            bail!("sweep section: lambdas must not be empty");
        }
        for &l in &self.sweep.lambdas {
            HSpec::sba_scaled(l, self.sweep.s).validate().context("sweep section")?;
        }
        self.sweep_base().validate().context("sweep section")?;
        Ok(())
    }

    /// Base configuration for sweep runs (the generator is replaced per λ).
    pub fn sweep_base(&self) -> TrainConfig {
        let sw = &self.sweep;
        TrainConfig {
            h: HSpec::sba_scaled(1.0, sw.s),
            ratio: self.train.ratio.clone(),
            clip_lo: self.train.clip_lo,
            clip_hi: self.train.clip_hi,
            step_size: sw.step_size.provisional(),
            batch_size: sw.batch_size,
            steps: sw.steps,
            mode: sw.mode,
            seed: self.train.seed,
            optimizer: sw.optimizer,
            stop_grad_norm: sw.stop_grad_norm,
        }
    }
}
