//! Core library for a lightweight ear-recognition system: tensors with
//! reverse-mode autodiff, low-rank linear layers, a hybrid convolution and
//! channel-attention backbone, losses, a complexity auditor, synthetic data
//! with augmentation, open-set evaluation metrics, and a small trainer.

pub mod backbone;
pub mod complexity;
pub mod data;
pub mod error;
pub mod eval;
pub mod loralin;
pub mod losses;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{GradTape, Tensor, Var};
