//! Minimal dense numerics for the set-inference engine.
//!
//! Everything is computed in `f64`. A [`Graph`] records operations as they
//! are evaluated and replays them in reverse to produce exact gradients for
//! the trainable tensors held in a [`ParamStore`]. [`Adam`] applies the
//! bias-corrected adaptive-moment update and [`checkpoint`] persists
//! parameters as little-endian `f32`.
//!
//! # Shapes and broadcasting
//!
//! Tensors carry an arbitrary shape, but every graph operation works on
//! matrices: a rank-0 tensor is `[1, 1]`, a rank-1 tensor of length `n` is
//! the row `[1, n]`, and rank-2 tensors are used as-is. Binary elementwise
//! operations (`add`, `sub`, `mul`, `div`) accept a right-hand side that is
//! either the same shape as the left, a single row `[1, n]` (broadcast down
//! the rows of an `[m, n]` left side), or a scalar `[1, 1]`. No other
//! broadcasting is performed.

pub mod checkpoint;
pub mod gradcheck;
mod error;
mod graph;
mod optim;
mod tensor;

pub use error::NumericsError;
pub use graph::{Gradients, Graph, ParamId, ParamStore, Var};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
