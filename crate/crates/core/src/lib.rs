//! Bregman ratio-matching preference optimization on enumerable toy policies.
//!
//! The crate is organised bottom-up: [`divergence`] holds the convex
//! generators, [`model_ratio`] the policy-side ratios, [`policy`] and
//! [`preference`] the toy models and synthetic targets, [`trainer`] the
//! optimisation loop, and [`analysis`] the verification procedures and sweeps.

pub mod analysis;
pub mod divergence;
pub mod error;
pub mod math;
pub mod metrics;
pub mod model_ratio;
pub mod numdiff;
pub mod policy;
pub mod preference;
pub mod trainer;

pub use divergence::{Generator, HSpec, DEFAULT_SBA_SCALE, RATIO_FLOOR};
pub use error::{BpoError, Result};
pub use metrics::{winrate_proxy, MetricSnapshot};
pub use model_ratio::{log_model_ratio, FSpec, RatioSpec, TripleLogProbs};
pub use policy::{Policy, PolicyKind, PolicySpec, ENUMERATION_LIMIT};
pub use preference::{PairDist, Target, TargetConfig, Triple, TripleDataset};
pub use trainer::{Mode, Optimizer, StepReport, TrainConfig, TrainError, TrainOutcome};

/// Version tag carried by every JSON document this crate writes.
pub const SCHEMA_VERSION: u32 = 1;
