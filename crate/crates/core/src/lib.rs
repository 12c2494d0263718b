//! Template independent component analysis.

pub mod dualreg;
pub mod em;
pub mod error;
pub mod infomax;
pub mod linalg;
pub mod matrix;
pub mod metrics;
pub mod mog;
pub mod reduce;
pub mod seed;
pub mod simulation;
pub mod template;

pub use error::{Result, TicaError};
pub use matrix::Matrix;
