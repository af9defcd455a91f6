use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Backbone applied to each region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Hierarchical pyramid transformer with spatial-reduction attention.
    Pvt,
    /// Single-resolution transformer producing the same output grid and width
    /// as the last pyramid stage.
    Vit,
}

/// Feature aggregator applied after the gated regions are reassembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    /// Transformer with a learned CLS token; the head reads the CLS embedding.
    Vit,
    /// Global average pooling of the projected map (ablation).
    Gap,
    /// Transformer without CLS token, mean-pooled.
    Pvt,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pvt" => Ok(Self::Pvt),
            "vit" => Ok(Self::Vit),
            _ => Err(Error::Config(format!("unknown encoder kind `{s}` (expected pvt|vit)"))),
        }
    }
}

impl std::str::FromStr for AggregatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vit" => Ok(Self::Vit),
            "gap" => Ok(Self::Gap),
            "pvt" => Ok(Self::Pvt),
            _ => Err(Error::Config(format!("unknown aggregator kind `{s}` (expected vit|gap|pvt)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

/// Every architectural hyperparameter of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Full input height (2H).
    pub input_height: usize,
    /// Full input width (2W).
    pub input_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub stage_channels: Vec<usize>,
    pub stage_heads: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub sra_ratios: Vec<usize>,
    pub num_regions: usize,
    pub cag_intermediate: usize,
    pub aggregator: AggregatorConfig,
    pub head_hidden: usize,
    pub encoder_kind: EncoderKind,
    /// Constant multiplier on the head output, normally the top of the score
    /// range, so the network works in unit scale.
    pub output_scale: f64,
}

/// How the input is tiled into regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionGrid {
    pub rows: usize,
    pub cols: usize,
}

impl RegionGrid {
    /// 4 → 2×2 quadrants, 2 → left/right halves, 6 → 2 rows × 3 columns.
    pub fn for_regions(n: usize) -> Result<Self> {
        match n {
            2 => Ok(Self { rows: 1, cols: 2 }),
            4 => Ok(Self { rows: 2, cols: 2 }),
            6 => Ok(Self { rows: 2, cols: 3 }),
            _ => Err(Error::Config(format!("num_regions must be 2, 4 or 6, got {n}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelConfig {
    /// Full-size configuration: 448×448 input split into four 224×224
    /// quadrants, patch size 4, stage widths 32/64/160/256 with 1/2/5/8 heads.
    pub fn paper() -> Self {
        Self {
            input_height: 448,
            input_width: 448,
            channels: 1,
            patch_size: 4,
            stage_channels: vec![32, 64, 160, 256],
            stage_heads: vec![1, 2, 5, 8],
            stage_depths: vec![2, 2, 2, 2],
            sra_ratios: vec![8, 4, 2, 1],
            num_regions: 4,
            cag_intermediate: 256,
            aggregator: AggregatorConfig {
                kind: AggregatorKind::Vit,
                dim: 256,
                depth: 2,
                heads: 4,
            },
            head_hidden: 128,
            encoder_kind: EncoderKind::Pvt,
            output_scale: 1.0,
        }
    }

    /// Desk-scale configuration: 64×64 input, one block per stage, aggregator width 64.
    pub fn desk() -> Self {
        Self {
            input_height: 64,
            input_width: 64,
            stage_depths: vec![1, 1, 1, 1],
            aggregator: AggregatorConfig {
                kind: AggregatorKind::Vit,
                dim: 64,
                depth: 2,
                heads: 4,
            },
            ..Self::paper()
        }
    }

    /// Tiny 16×16 configuration for exhaustive finite-difference checks.
    pub fn gradcheck(size: usize) -> Self {
        Self {
            input_height: size,
            input_width: size,
            channels: 1,
            patch_size: 1,
            stage_channels: vec![4, 8, 12, 16],
            stage_heads: vec![1, 2, 3, 4],
            stage_depths: vec![1, 1, 1, 1],
            sra_ratios: vec![4, 2, 1, 1],
            num_regions: 4,
            cag_intermediate: 16,
            aggregator: AggregatorConfig {
                kind: AggregatorKind::Vit,
                dim: 8,
                depth: 1,
                heads: 2,
            },
            head_hidden: 8,
            encoder_kind: EncoderKind::Pvt,
            output_scale: 1.0,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn region_grid(&self) -> Result<RegionGrid> {
        RegionGrid::for_regions(self.num_regions)
    }

    /// (H, W) of one region.
    pub fn region_size(&self) -> Result<(usize, usize)> {
        let grid = self.region_grid()?;
        if self.input_height % grid.rows != 0 || self.input_width % grid.cols != 0 {
            return Err(Error::Config(format!(
                "{}×{} input cannot be tiled into {}×{} regions",
                self.input_height, self.input_width, grid.rows, grid.cols
            )));
        }
        Ok((self.input_height / grid.rows, self.input_width / grid.cols))
    }

    /// Total downsampling from a region to the last stage, `P·2^(S−1)`.
    pub fn total_stride(&self) -> usize {
        self.patch_size << self.num_stages().saturating_sub(1)
    }

    /// Expected `(side_h, side_w, channels)` after each stage:
    /// `H/(2^(k−1)·P) × W/(2^(k−1)·P) × C_k`.
    pub fn stage_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (h, w) = self.region_size()?;
        Ok(self
            .stage_channels
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let div = self.patch_size << k;
                (h / div, w / div, c)
            })
            .collect())
    }

    /// Token grid seen by the aggregator after reassembly.
    pub fn aggregator_grid(&self) -> Result<(usize, usize)> {
        let grid = self.region_grid()?;
        let (h, w) = self.region_size()?;
        let s = self.total_stride();
        Ok((grid.rows * h / s, grid.cols * w / s))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let n = self.num_stages();
        if n == 0 {
            return fail("at least one stage is required".into());
        }
        if self.stage_heads.len() != n || self.stage_depths.len() != n || self.sra_ratios.len() != n {
            return fail(format!(
                "stage lists differ in length: channels {}, heads {}, depths {}, sra ratios {}",
                n,
                self.stage_heads.len(),
                self.stage_depths.len(),
                self.sra_ratios.len()
            ));
        }
        if self.channels == 0 || self.patch_size == 0 || self.cag_intermediate == 0 || self.head_hidden == 0 {
            return fail("channels, patch size, C_int and head width must be positive".into());
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return fail(format!("output scale {} must be positive", self.output_scale));
        }
        let (h, w) = self.region_size()?;
        let stride = self.total_stride();
        if h % stride != 0 || w % stride != 0 {
            return fail(format!(
                "region {h}×{w} is not divisible by P·2^(S−1) = {stride}"
            ));
        }
        for (k, (((&c, &heads), &depth), &r)) in self
            .stage_channels
            .iter()
            .zip(&self.stage_heads)
            .zip(&self.stage_depths)
            .zip(&self.sra_ratios)
            .enumerate()
        {
            if c == 0 || heads == 0 || c % heads != 0 {
                return fail(format!("stage {} width {c} not divisible by {heads} heads", k + 1));
            }
            if depth == 0 || r == 0 {
                return fail(format!("stage {} needs positive depth and reduction ratio", k + 1));
            }
            let div = self.patch_size << k;
            let (sh, sw) = (h / div, w / div);
            if sh % r != 0 || sw % r != 0 {
                return fail(format!(
                    "stage {} grid {sh}×{sw} is not divisible by reduction ratio {r}",
                    k + 1
                ));
            }
        }
        let agg = &self.aggregator;
        if agg.kind != AggregatorKind::Gap && (agg.depth == 0 || agg.heads == 0 || agg.dim % agg.heads != 0) {
            return fail(format!(
                "aggregator width {} / depth {} / heads {} are inconsistent",
                agg.dim, agg.depth, agg.heads
            ));
        }
        if agg.dim == 0 {
            return fail("aggregator width must be positive".into());
        }
        if self.encoder_kind == EncoderKind::Vit {
            let heads = *self.stage_heads.last().unwrap();
            let c = *self.stage_channels.last().unwrap();
            if c % heads != 0 {
                return fail(format!("encoder width {c} not divisible by {heads} heads"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_stage_sizes() {
        let mut cfg = ModelConfig::paper();
        cfg.input_height = 448;
        cfg.input_width = 448;
        cfg.validate().unwrap();
        assert_eq!(
            cfg.stage_shapes().unwrap(),
            vec![(56, 56, 32), (28, 28, 64), (14, 14, 160), (7, 7, 256)]
        );
    }

    #[test]
    fn desk_stage_sizes() {
        let cfg = ModelConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(
            cfg.stage_shapes().unwrap(),
            vec![(8, 8, 32), (4, 4, 64), (2, 2, 160), (1, 1, 256)]
        );
        assert_eq!(cfg.aggregator_grid().unwrap(), (2, 2));
    }

    #[test]
    fn region_counts() {
        let mut cfg = ModelConfig::desk();
        for (n, grid) in [(2, (2, 2)), (4, (2, 2)), (6, (2, 3))] {
            cfg.num_regions = n;
            if n == 6 {
                cfg.input_width = 96;
            }
            cfg.validate().unwrap();
            assert_eq!(cfg.aggregator_grid().unwrap(), grid, "n={n}");
        }
        cfg.num_regions = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut cfg = ModelConfig::desk();
        cfg.input_height = 60;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::desk();
        cfg.stage_heads.pop();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
