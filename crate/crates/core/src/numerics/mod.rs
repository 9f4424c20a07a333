//! Dense tensors, a reverse-mode tape, and the finite-difference oracle.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_strided, GradCheckReport};
pub use tape::{GradTape, ParamId, Tape, Var, MIN_NORM};
pub use tensor::{cross_entropy_from_logits, dot, l2_norm, log_sum_exp, stable_softmax, Tensor};
