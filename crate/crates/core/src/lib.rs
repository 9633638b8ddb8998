//! Deep equilibrium convolutional sparse coding for hyperspectral image denoising.

pub mod config;
pub mod error;
pub mod experiments;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod noise;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod prior;
pub mod solver;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{DecscError, Result};
