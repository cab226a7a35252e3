//! Tape-based reverse-mode differentiation over [`Tensor`](crate::Tensor) values.
//!
//! A [`Tape`] records each operation as it executes; [`Tape::backward`] walks
//! the record in reverse and sums gradients into every differentiable node.
//! Parameters live in a [`ParamStore`] outside the tape and are copied onto
//! it once per forward pass through [`Tape::param`].

mod conv;
pub mod gradcheck;
mod params;
mod tape;

pub use params::{sgd_step, Param, ParamGroup, ParamId, ParamStore, SgdConfig};
pub use tape::{Tape, Triple, Var};

pub(crate) use tape::half_sq_dist;
