//! Physics-constrained neural state-space models for multi-zone building
//! thermal dynamics.

pub mod autodiff;
pub mod blocks;
pub mod constraints;
pub mod data;
pub mod eigen;
pub mod emulator;
pub mod error;
pub mod linmap;
pub mod random;
pub mod scalar;
pub mod ssm;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
