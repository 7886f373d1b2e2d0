//! Dataset distillation by gradient matching, accelerated with a pool of
//! early-stage pre-trained networks and filter-normalized parameter
//! perturbation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: f64 tensors and a tape that supports
//!   gradient-of-gradient.
//! - [`nets`]: the ConvNet/MLP family and initialization; [`train`]: minibatch SGD.
//! - [`data`]: IDX and CIFAR binary loaders plus a procedural fixture generator.
//! - [`augment`]: shared-draw differentiable augmentation and multi-formation decode.
//! - [`modelpool`]: early-stage pretraining and checkpoint files.
//! - [`perturb`]: filter-normalized Gaussian parameter perturbation.
//! - [`matchloss`]: gradient/distribution matching objectives.
//! - [`distill`]: the outer/inner distillation loop and synthetic-set files.
//! - [`eval`]: train-on-synthetic evaluation, baselines, FLOPs and ablations.
//! - [`config`] and [`cli`]: the flat dotted-key run configuration and commands.

pub mod augment;
pub mod autodiff;
pub mod cli;
mod codec;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod matchloss;
pub mod modelpool;
pub mod nets;
pub mod perturb;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
