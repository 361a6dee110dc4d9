//! Differentiable f64 tensor computation: a fixed op catalog with exact
//! reverse-mode gradients on a tape, the ADAM optimizer, named parameter
//! stores, gradient checking, and a binary checkpoint container.
//!
//! Everything is CPU, row-major, deterministic: identical inputs,
//! attributes and seeds produce bit-identical outputs across runs.

mod adam;
mod checkpoint;
mod error;
mod gradcheck;
mod kernels;
mod nn;
mod store;
mod tape;
mod tensor;

pub use adam::{adam_update, AdamState};
pub use checkpoint::{load as load_checkpoint, save as save_checkpoint, Checkpoint};
pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, GradCheckReport, LossEval};
pub use nn::lstm_cell;
pub use store::{Entry, ParamStore, RESERVED_PREFIX};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
