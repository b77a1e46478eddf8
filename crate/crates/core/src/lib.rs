//! Kinematics-aware diffusion policy toolkit.

pub mod artifact;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod kinematics;
pub mod ikmlp;
pub mod env;
pub mod eval;
pub mod policy;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};
