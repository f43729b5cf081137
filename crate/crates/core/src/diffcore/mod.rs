//! Reverse-mode differentiation over batched `f64` matrices, with a
//! first-class stop-gradient node.

mod gradcheck;
mod matrix;
mod nn;
mod tape;

pub use gradcheck::{gradient_check, gradient_check_report, GradCheckReport};
pub use matrix::{gemm, Matrix, Trans};
pub use nn::{Adam, Bound, Linear, Mlp, ParamIdx, ParamStore};
pub use tape::{Gradients, NodeId, Op, Tape, TapeError};
