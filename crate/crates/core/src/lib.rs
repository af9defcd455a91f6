//! Severity regression from images with a quadrant-split pyramid vision
//! transformer, cross-attention gating between quadrants, and conditional
//! attention-guided label mixing (TransMix) for imbalanced score data.
//!
//! Everything runs on a small dense `f64` tensor engine with a dynamic
//! reverse-mode tape ([`autodiff::Tape`]).

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod scores;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
