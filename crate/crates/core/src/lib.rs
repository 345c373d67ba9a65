//! Adaptive per-channel temporal fusion for video classification.
//!
//! Frames of a clip run through a shared 2D CNN. Inside each gated block a
//! small policy network decides, per output channel and frame, whether the
//! convolution output is computed, copied from the previous frame, or
//! zeroed. Decisions are trained end to end with a straight-through
//! Gumbel-softmax estimator against cross entropy plus an analytic FLOPS
//! penalty.

mod error;

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod gating;
pub mod gradcheck;
pub mod layers;
mod linalg;
pub mod model;
pub mod par;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
