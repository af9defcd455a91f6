//! Score-level weights and the weighted L1 loss.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scores::{score_histogram, Modality};

/// Inverse-frequency weight per score level: `w_l = N / (c_l·k)`, and 0 for
/// levels with no samples.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTable {
    pub modality: Modality,
    pub levels: Vec<f64>,
    pub counts: Vec<usize>,
    pub weights: Vec<f64>,
    pub n: usize,
}

impl WeightTable {
    /// Builds the table from per-level counts (`k = counts.len()`).
    pub fn from_histogram(modality: Modality, counts: Vec<usize>) -> Result<Self> {
        let k = modality.num_levels();
        if counts.len() != k {
            return Err(Error::Contract(format!("{modality} needs {k} level counts, got {}", counts.len())));
        }
        let n: usize = counts.iter().sum();
        let weights = counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { n as f64 / (c as f64 * k as f64) })
            .collect();
        Ok(Self {
            modality,
            levels: modality.levels(),
            counts,
            weights,
            n,
        })
    }

    pub fn from_scores(modality: Modality, scores: &[f64]) -> Result<Self> {
        Self::from_histogram(modality, score_histogram(scores, modality)?)
    }

    /// Weight of the nearest level that has samples. For scores drawn from the
    /// dataset this is their own level; mixed scores can fall on empty levels
    /// and then borrow the closest populated neighbor (lower one on ties).
    pub fn weight(&self, score: f64) -> f64 {
        let idx = self.modality.level_index(score);
        if self.counts[idx] > 0 {
            return self.weights[idx];
        }
        for d in 1..self.levels.len() {
            for j in [idx.checked_sub(d), Some(idx + d)].into_iter().flatten() {
                if j < self.counts.len() && self.counts[j] > 0 {
                    return self.weights[j];
                }
            }
        }
        0.0
    }

    pub fn weights_for(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.weight(s)).collect()
    }
}

/// `(1/B)·Σ wᵢ·|yᵢ − ŷᵢ|` over a prediction vector, weights looked up from
/// each target.
pub fn weighted_l1_loss(tape: &mut Tape<'_>, preds: Var, targets: &[f64], table: &WeightTable) -> Result<Var> {
    let weights = table.weights_for(targets);
    tape.weighted_l1(preds, targets, &weights)
}
