//! Samples, on-disk datasets, the synthetic surrogate task and checkpoints.

pub mod checkpoint;
pub mod io;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, FORMAT_VERSION};
pub use io::{load_dataset, read_pgm, resize_bilinear, write_dataset, write_pgm};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::tensor::Tensor;

/// One image and its severity score.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `C×H×W`, values in [0, 1].
    pub image: Tensor,
    pub score: f64,
}

/// Scores of a sample slice, in order.
pub fn scores(samples: &[Sample]) -> Vec<f64> {
    samples.iter().map(|s| s.score).collect()
}
