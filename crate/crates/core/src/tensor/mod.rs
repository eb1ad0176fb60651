//! Dense matrices, a differentiation tape, and a finite-difference oracle.

mod dense;
mod gradcheck;
mod tape;

pub use dense::{cosine, cosine_slices, Cosine, Tensor};
pub use gradcheck::{gradcheck, gradcheck_with, GradcheckReport, REL_FLOOR};
pub use tape::{softmax_rows, Gradients, OpKind, Tape, Var, PROB_FLOOR};
