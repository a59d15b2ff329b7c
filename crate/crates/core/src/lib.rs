//! Margin regularization for class-level performance disparity.
//!
//! Per-class feature statistics drive a logit-level margin schedule
//! (`γ_k ∝ (‖μ̂_k‖² + ‖ŝ_k‖²)^{1/3}`) and a representation-level compactness
//! loss; the remaining modules train small models under that objective, evaluate
//! per-class disparity, and numerically evaluate the generalization bounds that
//! motivate it.

pub mod bounds;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod eval_metrics;
pub mod feature_stats;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod margin_schedule;
pub mod model;
pub mod objective;
pub mod trainer;

mod binio;

pub use bounds::{BoundConfig, BoundReport};
pub use checkpoint::Checkpoint;
pub use datagen::{Dataset, Split, SynthSpec};
pub use error::{Error, Result};
pub use eval_metrics::EvalReport;
pub use feature_stats::ClassStats;
pub use linalg::Matrix;
pub use margin_schedule::{DeltaKind, MarginVector};
pub use model::{Activation, Architecture, EncoderKind, HeadKind, ModelParams};
pub use trainer::{Objective, TrainConfig, TrainLog};
