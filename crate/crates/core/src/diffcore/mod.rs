//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! Primitives (all on [`Tape`]): `matmul`, `matmul_nt`, `add`, `add_row`,
//! `mul`, `scale`, `concat_rows`, `concat_cols`, `slice_rows`, `slice_cols`,
//! `softmax`, `causal_softmax`, `log_softmax`, `layer_norm`, `gelu`,
//! `embedding`, `gather`, `sum`, `mean`, `sigmoid`, `log_sigmoid`.
//! Matrix primitives take 2-D operands; `add_row` and `layer_norm` take
//! length-`n` vectors for the broadcast operands.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_MAX_COORDS};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
