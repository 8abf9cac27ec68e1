//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every model in the crate records its forward pass on a [`Tape`] and reads
//! parameter gradients back by name after [`Tape::backward`]. Batched vectors
//! are stored as rows, so a linear layer is `x * W^T + b`.

mod gradcheck;
mod tape;

#[cfg(test)]
pub(crate) use tape::gelu;

pub use gradcheck::finite_difference_check;
pub use tape::{Gradients, Tape, Unary, Var};


#[cfg(test)]
mod tests;
