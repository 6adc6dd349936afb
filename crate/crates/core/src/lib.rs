//! Deterministic desk-scale laboratory for dropout scheduling in small
//! transformer language models: a reverse-mode autodiff tensor core, the
//! dropout operator and ratio schedules, a decoder-only transformer, a
//! training loop with byte-exact replay, and gradient-direction
//! instrumentation.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dropout;
pub mod error;
pub mod gdv;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{bernoulli_mask, Tensor};
