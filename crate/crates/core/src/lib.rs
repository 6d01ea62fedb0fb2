//! Diffusion-feedback tuning of a small vision-transformer encoder.
//!
//! A frozen conditional denoiser reconstructs noised images from a
//! condition assembled out of the encoder's tokens; the reconstruction
//! loss is back-propagated into the encoder only.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod condition;
pub mod config;
pub mod denoiser;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod io;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use condition::{build_condition, Condition, RecapStrategy};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use encoder::{Encoder, EncoderConfig, ImageTensor, TokenSequence};
pub use error::{DivaError, Result};
pub use params::ParamSet;
pub use rng::{sample_gaussian, RngStream};
pub use schedule::NoiseSchedule;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use trainer::{Models, Phase, TrainConfig};
