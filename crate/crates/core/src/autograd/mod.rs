//! Dense f64 tensors with tape-based reverse-mode differentiation.

mod optim;
mod tape;
mod tensor;

pub use optim::{adam_step, sgd_step, AdamConfig, AdamState, Optimizer};
pub use tape::{Tape, Var};
pub use tensor::{ParamStore, Tensor};
