//! Dense tensors, a gradient tape, Adam, and finite-difference checking.

mod gradcheck;
mod optim;
mod tape;
mod value;

pub use gradcheck::{grad_check, relative_error, GradCheck, GradCheckReport};
pub use optim::{clip_grad_norm, AdamState};
pub use tape::{CausalMask, Gradients, Tape, Var};
pub use value::{ParamStore, Tensor};
