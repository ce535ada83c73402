pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod eval;
pub mod models;
pub mod pgm;
pub mod tensor;

pub use tensor::{Tape, Tensor, TensorError, TensorId};
