//! Counterfactual image synthesis on synthetic lesion phantoms.
//!
//! A conditional generator perturbs a baseline phantom image so that a frozen
//! future-activity classifier flips its prediction, while reconstruction and
//! adversarial terms keep the output subject-faithful and realistic. Planted
//! causal markers in the phantoms make marker discovery quantitatively
//! verifiable.
//!
//! Crate layout:
//! - [`tensor`], [`graph`], [`params`], [`gradcheck`]: the differentiable
//!   computation kit (tensors, reverse-mode tape, Adam, checkpoints,
//!   finite-difference verification).
//! - [`phantom`]: seeded generator of longitudinal brain phantoms with
//!   planted markers.
//! - [`models`]: conditional UNet generator, residual classifier and
//!   discriminator.
//! - [`objective`]: the composite generator/discriminator losses and the
//!   classifier pretraining loss.
//! - [`trainer`]: classifier pretraining, alternating adversarial training,
//!   and the ablation runner.
//! - [`eval`]: SSIM, lesion/gad oracles, class-flip rate, difference maps,
//!   marker localization and report assembly.
//! - [`config`]: the JSON run configuration shared by all pipeline stages.

pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod models;
pub mod objective;
pub mod params;
pub mod phantom;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, ConfigError, EvalError, PhantomError, TensorError, TrainError};
pub use graph::{Graph, NodeId};
pub use params::ParamStore;
pub use tensor::{Scalar, Tensor};
