//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! Every forward pass appends nodes to a [`Tape`]; [`Tape::backward`] then
//! walks the tape once in reverse, accumulating adjoints. The tape is cheap
//! to build and is meant to be discarded and rebuilt for every batch, which
//! is what makes sampled weights straightforward: a fresh draw is just a
//! fresh leaf.
//!
//! All values are `f64`. Tensors are rank 0, 1, or 2, and operations never
//! broadcast implicitly; the only scalar-tensor mixing is through explicit
//! constant ops such as [`Tape::scale`] and [`Tape::add_const`].

mod tape;
mod tensor;

pub use tape::{softplus as softplus_scalar, Gradients, Tape, Var};
pub use tensor::{AutodiffError, Tensor};
