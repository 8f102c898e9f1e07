//! Negated float comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archmask;
pub mod autodiff;
pub mod conv;
pub mod error;
pub mod experiment;
pub mod fields;
pub mod io;
pub mod masks;
pub mod params;
pub mod rng;
pub mod spectral;
pub mod tasks;
pub mod tensor;

pub use autodiff::{ConvMode, Gradients, Precision, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
