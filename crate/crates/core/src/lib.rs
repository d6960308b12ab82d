//! Joint reconstruction of many ill-posed imaging inverse problems without an
//! explicit image prior.
//!
//! A single Deep Decoder generator is shared across all measurements and each
//! measurement gets its own Gaussian latent posterior. Both are fitted by
//! gradient ascent on a Monte-Carlo estimate of the ELBO proxy
//! `E_q[log p(y | G(z)) + log p(z) - log q(z)]`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod forward;
pub mod fourier;
pub mod generator;
pub mod gradcheck;
pub mod io;
pub mod objective;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod selection;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod variational;

pub use error::{Error, Result};
pub use forward::{ForwardKind, ForwardModel, ForwardOperator, MeasurementSet};
pub use generator::{DeepDecoderConfig, Generator, GeneratorParams, Mode};
pub use tensor::{Gradients, Tape, Tensor, Var};
pub use train::{TrainConfig, TrainReport, TrainState, Trainer};
pub use variational::GaussianVariational;
