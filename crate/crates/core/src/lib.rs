//! Denoised world models: factorized latent dynamics that keep controllable,
//! reward-relevant signal in one latent factor and push noise distractors
//! into the others.

pub mod config;
pub mod distributions;
pub mod env;
pub mod error;
pub mod nn;
pub mod policy;
pub mod probe;
pub mod replay;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod world_model;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
