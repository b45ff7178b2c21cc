//! Context-aware diffusion object detection.
//!
//! Boxes are generated by denoising random proposals, conditioned on RoI
//! features from a feature pyramid and on a global scene embedding that is
//! fused into every proposal through cross-attention.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and the reverse-mode gradient tape
//! - [`diffusion`]: cosine schedule, forward corruption, DDIM step, box renewal
//! - [`geometry`]: box formats, IoU/GIoU, pyramid level assignment, NMS
//! - [`backbone`]: CNN backbone, channel attention, FPN, global context encoder, RoI pooling
//! - [`head`]: self/cross attention fusion, conditional embeddings, prediction heads
//! - [`loss`]: focal/L1/GIoU terms, Hungarian matching, set loss
//! - [`detector`]: parameters, training step, DDIM inference, checkpoints
//! - [`eval`]: COCO-style average precision
//! - [`data`]: synthetic dataset generation and COCO annotation I/O
//! - [`cli`]: the `cdiffdet` command-line front end

// Tape ops mirror operator names, and `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod cli;
pub mod data;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod json;
pub mod loss;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
