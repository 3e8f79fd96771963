//! Noisy feed-forward networks trained in silico under a presumed noise
//! level, and gradient-informed fine-tuning (GIFT) against a forward-only
//! noisy device whose true noise differs.
//!
//! The pieces, bottom-up:
//!
//! - [`model`] and [`noise`]: the layered network `M_s`, its parameters,
//!   the box constraint and the four noise families.
//! - [`gradients`]: backpropagation of the squared loss under a fixed noise
//!   realization.
//! - [`trainer`]: projected mini-batch SGD at the presumed level `s0`.
//! - [`device`]: the opaque device, which only answers forward queries.
//! - [`gift`]: the noise-sensitivity direction estimator, in-situ evaluation
//!   and the bidirectional line search.
//! - [`theory`]: numerical checks of the supporting identities and of the
//!   linear-network closed forms.
//! - [`data`]: MNIST IDX loading and synthetic tasks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod device;
pub mod error;
pub mod gift;
pub mod gradients;
pub mod model;
pub mod noise;
pub mod rng;
pub mod stats;
pub mod tensors;
pub mod theory;
pub mod trainer;

mod batch;

pub use device::Device;
pub use error::{Error, IdxError, Result};
pub use gift::{Direction, DirectionMethod, EvalReport, GiftConfig, GiftTrace, StopRule};
pub use gradients::{GradSample, Gradient};
pub use model::{Activation, Architecture, ForwardTrace, Hyperrectangle, Params};
pub use noise::{NoiseDraw, NoiseFamily, NoiseModel};
pub use rng::RngStream;
pub use tensors::{LayerTensors, Tensors};
pub use trainer::{TrainConfig, TrainOutcome};
