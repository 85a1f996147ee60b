//! Router-gated cross-modal fusion for audio-visual sequence recognition.
//!
//! A reliability router scores how well each audio patch agrees with the
//! video, and a transformer decoder uses that score to decide, position by
//! position, how much visual evidence to inject.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod nn;
pub mod router;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
