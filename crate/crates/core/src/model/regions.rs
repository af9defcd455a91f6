//! Tiling of an image into non-overlapping regions and the inverse.

use std::fmt;

use super::config::RegionGrid;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Grid position of a region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionTag {
    pub row: usize,
    pub col: usize,
    grid: RegionGrid,
}

impl fmt::Display for RegionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.grid.rows, self.grid.cols, self.row, self.col) {
            (2, 2, 0, 0) => f.write_str("TL"),
            (2, 2, 0, 1) => f.write_str("TR"),
            (2, 2, 1, 0) => f.write_str("BL"),
            (2, 2, 1, 1) => f.write_str("BR"),
            (1, 2, 0, 0) => f.write_str("L"),
            (1, 2, 0, 1) => f.write_str("R"),
            (_, _, r, c) => write!(f, "R{r}C{c}"),
        }
    }
}

/// The regions of one image, in row-major grid order.
#[derive(Clone, Debug)]
pub struct QuadrantSet {
    pub grid: RegionGrid,
    pub regions: Vec<(RegionTag, Tensor)>,
}

impl QuadrantSet {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.regions.iter().map(|(_, t)| t)
    }
}

/// Splits `image[C×H×W]` into `n` equal tiles (4 → 2×2, 2 → left/right, 6 → 2×3).
pub fn split_regions(image: &Tensor, n: usize) -> Result<QuadrantSet> {
    let grid = RegionGrid::for_regions(n)?;
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(dim_err!("image must be C×H×W, got {s:?}")),
    };
    if h % grid.rows != 0 || w % grid.cols != 0 {
        return Err(Error::Config(format!(
            "{h}×{w} image cannot be tiled into {}×{} regions",
            grid.rows, grid.cols
        )));
    }
    let (th, tw) = (h / grid.rows, w / grid.cols);
    let src = image.data();
    let mut regions = Vec::with_capacity(n);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let mut data = Vec::with_capacity(c * th * tw);
            for ch in 0..c {
                for y in 0..th {
                    let start = ch * h * w + (row * th + y) * w + col * tw;
                    data.extend_from_slice(&src[start..start + tw]);
                }
            }
            regions.push((RegionTag { row, col, grid }, Tensor::from_parts(vec![c, th, tw], data)));
        }
    }
    Ok(QuadrantSet { grid, regions })
}

/// Places the tiles back on their grid; inverse of [`split_regions`].
pub fn reassemble(set: &QuadrantSet) -> Result<Tensor> {
    let grid = set.grid;
    let first = set
        .regions
        .first()
        .ok_or_else(|| dim_err!("cannot reassemble an empty region set"))?
        .1
        .shape()
        .to_vec();
    if set.len() != grid.len() {
        return Err(dim_err!("{} regions for a {}×{} grid", set.len(), grid.rows, grid.cols));
    }
    let (c, th, tw) = match *first.as_slice() {
        [c, h, w] => (c, h, w),
        ref s => return Err(dim_err!("regions must be C×H×W, got {s:?}")),
    };
    let (h, w) = (th * grid.rows, tw * grid.cols);
    let mut out = vec![0.0; c * h * w];
    for (tag, t) in &set.regions {
        if t.shape() != first.as_slice() {
            return Err(dim_err!("region {tag} has shape {:?}, expected {first:?}", t.shape()));
        }
        for ch in 0..c {
            for y in 0..th {
                let dst = ch * h * w + (tag.row * th + y) * w + tag.col * tw;
                let src = (ch * th + y) * tw;
                out[dst..dst + tw].copy_from_slice(&t.data()[src..src + tw]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_quadrants_row_major() {
        let img = Tensor::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let set = split_regions(&img, 4).unwrap();
        let tags: Vec<String> = set.regions.iter().map(|(t, _)| t.to_string()).collect();
        assert_eq!(tags, ["TL", "TR", "BL", "BR"]);
        let data: Vec<&[f64]> = set.tensors().map(Tensor::data).collect();
        assert_eq!(data[0], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(data[1], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(data[2], &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(data[3], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn two_vertical_halves() {
        let img = Tensor::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let set = split_regions(&img, 2).unwrap();
        assert_eq!(set.len(), 2);
        for t in set.tensors() {
            assert_eq!(t.shape(), &[1, 4, 2]);
        }
        assert_eq!(set.regions[1].1.data(), &[2.0, 3.0, 6.0, 7.0, 10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn indivisible_is_config_error() {
        let img = Tensor::zeros(&[1, 5, 4]);
        assert!(matches!(split_regions(&img, 4), Err(Error::Config(_))));
        assert!(matches!(split_regions(&img, 3), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn split_then_reassemble_is_identity(
            c in 1usize..3,
            hm in 1usize..4,
            wm in 1usize..4,
            n in prop::sample::select(vec![2usize, 4, 6]),
            seed in any::<u64>(),
        ) {
            let grid = RegionGrid::for_regions(n).unwrap();
            let (h, w) = (hm * grid.rows, wm * grid.cols * 2);
            let numel = c * h * w;
            let data: Vec<f64> = (0..numel).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0).collect();
            let img = Tensor::new(&[c, h, w], data).unwrap();
            let back = reassemble(&split_regions(&img, n).unwrap()).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
