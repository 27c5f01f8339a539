//! Label-free influence scores for self-supervised encoders.
//!
//! The score of an example `x` with augmented view `x̂` is
//! `I(x) = −gᵀ(H + λI)⁻¹g`, where `g` is the gradient of the alignment loss
//! between `f(x)` and `f(x̂)` with respect to the encoder parameters and `H`
//! is the curvature of the averaged alignment loss. For linear encoders the
//! score has closed forms, checked by [`verify::run_suite`].
//!
//! All randomness is derived from explicit seeds, and parallel maps return
//! results in index order, so every output is independent of thread count.

pub mod augment;
pub mod cli;
pub mod config;
pub mod curvature;
pub mod data;
pub mod encoder;
pub mod error;
pub mod influence;
pub mod linalg;
pub mod loss;
pub mod numdiff;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod trainer;
pub mod verify;

pub use augment::{AugmentationSpec, SeedPolicy};
pub use config::RunConfig;
pub use curvature::{Backend, CurvatureConfig, CurvatureOperator, Damping};
pub use data::{Dataset, SyntheticSpec};
pub use encoder::{EncoderKind, EncoderParams, EncoderSpec};
pub use error::{Error, Result};
pub use influence::InfluenceRecord;
pub use loss::LossKind;
pub use pipeline::ExperimentReport;
pub use trainer::TrainConfig;
