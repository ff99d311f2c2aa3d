//! Interpretation toolkit for a small two-pathway visual question answering
//! classifier.
//!
//! The crate trains a convolutional image pathway fused with a ReLU-free
//! question pathway on a synthetic shapes-and-colors task, then explains the
//! model's predictions two ways:
//!
//! - **Guided backpropagation**: input gradients of the predicted answer's
//!   probability, with an alternative ReLU backward rule that blocks
//!   negative gradients.
//! - **Occlusion**: discrete derivatives measured by masking one image cell
//!   (or dropping one question word) at a time and recording the drop in the
//!   predicted answer's probability.
//!
//! The evaluation pipeline scores importance maps by Spearman rank
//! correlation against per-example relevance masks, builds a
//! part-of-speech histogram of most-important words, and turns
//! answer-flip counts under occlusion into a success/failure predictor.

pub mod attribution;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod kernels;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{relu_backward, Gradients, Op, ReluMode, Tape, ValueId};
pub use tensor::{Scalar, Tensor};
