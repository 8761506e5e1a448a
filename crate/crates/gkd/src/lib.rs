//! Desk-scale knowledge distillation for object detection, self-contained
//! from the autodiff tape up.
//!
//! The crate trains a small convolutional detector on synthetic shape scenes
//! and distills it from a wider teacher using two signals:
//!
//! * gradient-guided target maps — per-level saliency maps built from the
//!   task-loss gradient at each feature level ([`saliency`]), and
//! * box-aware multi-grained feature imitation — masked feature regression
//!   weighted by box masks and spatial/channel attention ([`imitation`]).
//!
//! Everything runs on the CPU in `f64` with no numeric dependencies; see the
//! `examples/` directory for runnable walkthroughs of each piece and
//! [`cli`] for the command-line pipeline.

pub mod cli;
pub mod data;
pub mod detector;
pub mod distill;
pub mod error;
pub mod eval;
pub mod fdcheck;
pub mod imitation;
pub mod io;
pub mod saliency;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{finite_difference_gradient, Gradients, Op, Tape, Tensor};
