//! Severity score modalities, their level grids and the eligibility rule for
//! conditional mixing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// Geographic extent, 0–8 in steps of 0.5.
    Ge,
    /// Lung opacity, 0–8 in steps of 0.5.
    Lo,
    /// Infection percentage, 0–100 in steps of 1.
    Cip,
}

impl Modality {
    pub fn range_max(self) -> f64 {
        match self {
            Self::Ge | Self::Lo => 8.0,
            Self::Cip => 100.0,
        }
    }

    pub fn level_step(self) -> f64 {
        match self {
            Self::Ge | Self::Lo => 0.5,
            Self::Cip => 1.0,
        }
    }

    /// Number of score levels `k` (17 or 101).
    pub fn num_levels(self) -> usize {
        (self.range_max() / self.level_step()).round() as usize + 1
    }

    pub fn levels(self) -> Vec<f64> {
        (0..self.num_levels()).map(|i| i as f64 * self.level_step()).collect()
    }

    /// Index of the nearest level. Scores must already be in range.
    pub fn level_index(self, score: f64) -> usize {
        let i = (score / self.level_step()).round();
        (i.max(0.0) as usize).min(self.num_levels() - 1)
    }

    pub fn nearest_level(self, score: f64) -> f64 {
        self.level_index(score) as f64 * self.level_step()
    }

    pub fn in_range(self, score: f64) -> bool {
        (0.0..=self.range_max()).contains(&score)
    }

    pub fn check(self, score: f64) -> Result<()> {
        if self.in_range(score) {
            Ok(())
        } else {
            Err(Error::Dataset(format!(
                "score {score} outside the {self} range [0, {}]",
                self.range_max()
            )))
        }
    }

    /// Whether a sample with this ground-truth score belongs to an
    /// under-represented part of the distribution and should be mixed.
    pub fn eligible(self, score: f64) -> bool {
        match self {
            Self::Ge => score <= 4.0,
            Self::Lo => !(2.0..=6.0).contains(&score),
            Self::Cip => score > 10.0,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ge => "ge",
            Self::Lo => "lo",
            Self::Cip => "cip",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ge" => Ok(Self::Ge),
            "lo" => Ok(Self::Lo),
            "cip" => Ok(Self::Cip),
            _ => Err(Error::Config(format!("unknown modality `{s}` (expected ge|lo|cip)"))),
        }
    }
}

/// Sample count per score level.
pub fn score_histogram(scores: &[f64], modality: Modality) -> Result<Vec<usize>> {
    let mut counts = vec![0; modality.num_levels()];
    for &s in scores {
        modality.check(s)?;
        counts[modality.level_index(s)] += 1;
    }
    Ok(counts)
}
