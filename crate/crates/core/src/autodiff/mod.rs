//! Minimal reverse-mode automatic differentiation over dense fp64 arrays.

mod gemm;
pub mod ops;
pub mod optim;
mod tape;

pub use ops::COSINE_EPS;
pub use optim::{adam_step, AdamState};
pub use tape::{Tape, Var};
