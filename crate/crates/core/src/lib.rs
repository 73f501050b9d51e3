//! Contrastive image-text training on procedurally generated scenes.

pub mod error;
pub mod losses;
pub mod models;
pub mod rng;
pub mod scenes;
pub mod tensor;
pub mod trainer;
pub mod views;

pub use error::{Error, Result};
pub use tensor::{DType, Gradients, Graph, Mask, Real, Tensor, TensorError, Var};
