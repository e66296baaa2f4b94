//! Boundary-squeeze segmentation at desk scale: dense field types, a small
//! reverse-mode autodiff tape, morphological supervision targets, bilinear
//! feature warping, losses, the model graph with its training loop, and
//! boundary-aware evaluation metrics.

pub mod autodiff;
pub mod bsm;
pub mod config;
pub mod dataio;
pub mod error;
pub mod experiments;
pub mod field;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod morphology;
pub mod viz;
pub mod warp;

pub use bsm::{BSMConfig, BsmOutput, InferOutput, ModelParams, OptimConfig, TrainResult};
pub use config::{EvalConfig, RunConfig};
pub use dataio::{DataConfig, Sample};
pub use error::{Error, Result};
pub use field::{ConvKind, ConvSpec, FeatureField};
pub use losses::{BranchLogits, BranchSet, LossBreakdown, LossConfig};
pub use metrics::EvalReport;
pub use morphology::{BinaryMask, KernelSize, TargetSet};
pub use warp::{FlowField, SfgSpec};
