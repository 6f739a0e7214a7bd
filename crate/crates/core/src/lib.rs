//! Hybrid quantum-classical neural radiance fields on a CPU statevector simulator.

pub mod autodiff;
pub mod circuits;
pub mod dataio;
pub mod error;
pub mod field;
pub mod noise;
pub mod qsim;
pub mod renderer;
pub mod trainer;

pub use error::{Error, Result};
