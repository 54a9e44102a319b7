//! Lévy codebooks: Fourier pricing between codebooks and call surfaces, codebook
//! dynamics driven by subordinators, and risk-neutrality checks.

pub mod codebook;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod levy;
pub mod models;
pub mod pricing;
pub mod validation;

pub use codebook::{CodebookSurface, GridSpec, Parametrisation, PiReport};
pub use error::{Error, Result};
pub use levy::{CharExponent, JointExponent, JumpSpec, LevyTriplet};
pub use num_complex::Complex64;
