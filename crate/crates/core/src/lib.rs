//! De novo peptide sequencing with latent-space imputation of missing
//! fragment peaks.
//!
//! The numeric core (`autograd`, `neural`, `assign`, `infer`, `train`) is
//! generic over [`Scalar`]; the aliases at the bottom of this file pin the
//! usual choices.

pub mod assign;
pub mod autograd;
pub mod chem;
pub mod error;
pub mod evalx;
pub mod infer;
pub mod io_util;
pub mod msio;
pub mod neural;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Model32 = neural::Model<f32>;
pub type Model64 = neural::Model<f64>;
pub type Tape32<'p> = autograd::Tape<'p, f32>;
pub type Tape64<'p> = autograd::Tape<'p, f64>;
pub type Checkpoint32 = train::Checkpoint<f32>;
pub type Checkpoint64 = train::Checkpoint<f64>;
/// Exact costs for the assignment solver.
pub type Rational = num_rational::Ratio<i64>;
