//! Class-conditioned denoising diffusion with variational quantum circuits
//! spliced into the denoiser.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nnet;
pub mod qsim;
pub mod quanv;
pub mod rng;

pub use error::{Error, Result};
