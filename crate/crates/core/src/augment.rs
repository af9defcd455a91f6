//! Attention-guided CutMix relabeling (TransMix) for regression, applied
//! only to samples in under-represented score ranges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{dim_err, Error, Result};
use crate::model::QCrossModel;
use crate::scores::Modality;
use crate::tensor::Tensor;

pub const MIN_AREA: f64 = 0.05;
pub const MAX_AREA: f64 = 0.5;

/// Axis-aligned rectangle of pixels taken from the partner image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutMask {
    pub height: usize,
    pub width: usize,
    pub top: usize,
    pub left: usize,
    pub cut_h: usize,
    pub cut_w: usize,
}

impl CutMask {
    /// Draws a rectangle whose area fraction is uniform in [0.05, 0.5] and
    /// whose center is uniform over the positions where it fits.
    pub fn sample<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::Config(format!("cut mask needs at least 8×8 pixels, got {height}×{width}")));
        }
        let area: f64 = rng.random_range(MIN_AREA..=MAX_AREA);
        let total = (height * width) as f64;
        let cut_h = ((height as f64 * area.sqrt()).round() as usize).clamp(1, height);
        let lo = (MIN_AREA * total / cut_h as f64).ceil() as usize;
        let hi = ((MAX_AREA * total / cut_h as f64).floor() as usize).min(width);
        let cut_w = ((area * total / cut_h as f64).round() as usize).clamp(lo, hi);
        let cy = rng.random_range(cut_h as f64 / 2.0..=height as f64 - cut_h as f64 / 2.0);
        let cx = rng.random_range(cut_w as f64 / 2.0..=width as f64 - cut_w as f64 / 2.0);
        let top = ((cy - cut_h as f64 / 2.0).round() as usize).min(height - cut_h);
        let left = ((cx - cut_w as f64 / 2.0).round() as usize).min(width - cut_w);
        Ok(Self {
            height,
            width,
            top,
            left,
            cut_h,
            cut_w,
        })
    }

    pub fn area_fraction(&self) -> f64 {
        (self.cut_h * self.cut_w) as f64 / (self.height * self.width) as f64
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.cut_h).contains(&y) && (self.left..self.left + self.cut_w).contains(&x)
    }

    /// Binary `H×W` map, 1 inside the rectangle.
    pub fn to_map(&self) -> Tensor {
        let mut m = Tensor::zeros(&[self.height, self.width]);
        let w = self.width;
        for y in self.top..self.top + self.cut_h {
            m.data_mut()[y * w + self.left..y * w + self.left + self.cut_w].fill(1.0);
        }
        m
    }
}

/// `(1 − M)⊙A + M⊙B`, with the `H×W` mask broadcast over channels.
pub fn apply_cutmix(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(dim_err!("cannot mix images {:?} and {:?}", a.shape(), b.shape()));
    }
    let (c, h, w) = match *a.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(dim_err!("images must be C×H×W, got {s:?}")),
    };
    if mask.shape() != [h, w] {
        return Err(dim_err!("mask {:?} does not match image {h}×{w}", mask.shape()));
    }
    let m = mask.data();
    let mut out = Vec::with_capacity(a.numel());
    for ch in 0..c {
        let off = ch * h * w;
        for i in 0..h * w {
            out.push((1.0 - m[i]) * a.data()[off + i] + m[i] * b.data()[off + i]);
        }
    }
    Tensor::new(a.shape(), out)
}

/// Nearest-neighbor downsampling of an `H×W` mask to a `gh×gw` grid: each cell
/// takes the mask value at its center pixel `(⌊(i+½)·H/gh⌋, ⌊(j+½)·W/gw⌋)`.
pub fn downsample_mask(mask: &Tensor, (gh, gw): (usize, usize)) -> Result<Tensor> {
    let (h, w) = match *mask.shape() {
        [h, w] => (h, w),
        ref s => return Err(dim_err!("mask must be 2-d, got {s:?}")),
    };
    if gh == 0 || gw == 0 || gh > h || gw > w {
        return Err(dim_err!("cannot downsample a {h}×{w} mask to {gh}×{gw}"));
    }
    let mut out = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        let y = ((2 * i + 1) * h) / (2 * gh);
        for j in 0..gw {
            let x = ((2 * j + 1) * w) / (2 * gw);
            out.push(mask.data()[y * w + x]);
        }
    }
    Tensor::new(&[gh, gw], out)
}

/// `λ = Σ_j Att[j]·M↓[j]`, clamped into [0, 1] against rounding.
pub fn compute_lambda(attention: &Tensor, mask: &Tensor, grid: (usize, usize)) -> Result<f64> {
    if attention.numel() != grid.0 * grid.1 {
        return Err(dim_err!(
            "attention has {} entries but the patch grid is {}×{}",
            attention.numel(),
            grid.0,
            grid.1
        ));
    }
    let down = downsample_mask(mask, grid)?;
    let lambda: f64 = attention.data().iter().zip(down.data()).map(|(a, m)| a * m).sum();
    if !lambda.is_finite() {
        return Err(Error::NonFinite(format!("mixing coefficient is {lambda}")));
    }
    Ok(lambda.clamp(0.0, 1.0))
}

/// `ȳ = λ·y_B + (1 − λ)·y_A`.
pub fn mixed_score(y_a: f64, y_b: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("mixing coefficient {lambda} is outside [0, 1]")));
    }
    Ok(lambda * y_b + (1.0 - lambda) * y_a)
}

/// Supplies the normalized patch attention map of an image.
pub trait AttentionProvider {
    /// Attention over the `gh×gw` patch grid, summing to one.
    fn attention(&self, image: &Tensor) -> Result<Tensor>;
}

impl AttentionProvider for QCrossModel {
    fn attention(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.inspect(image)?.attention)
    }
}

/// A mixed sample and how it was made.
#[derive(Clone, Debug)]
pub struct MixRecord {
    pub anchor: usize,
    pub partner: usize,
    pub mask: CutMask,
    pub lambda: f64,
    pub y_a: f64,
    pub y_b: f64,
    pub y_bar: f64,
    pub image: Tensor,
}

/// Mixes one anchor with one partner: paste, attend on the mixed image, relabel.
pub fn transmix_pair<P: AttentionProvider + ?Sized, R: Rng + ?Sized>(
    a: &Sample,
    b: &Sample,
    provider: &P,
    rng: &mut R,
) -> Result<(CutMask, Tensor, f64, f64)> {
    let (h, w) = match *a.image.shape() {
        [_, h, w] => (h, w),
        ref s => return Err(dim_err!("images must be C×H×W, got {s:?}")),
    };
    let mask = CutMask::sample(h, w, rng)?;
    let image = apply_cutmix(&a.image, &b.image, &mask.to_map())?;
    let att = provider.attention(&image)?;
    let grid = match *att.shape() {
        [gh, gw] => (gh, gw),
        ref s => return Err(dim_err!("attention map must be gh×gw, got {s:?}")),
    };
    let lambda = compute_lambda(&att, &mask.to_map(), grid)?;
    let y_bar = mixed_score(a.score, b.score, lambda)?;
    Ok((mask, image, lambda, y_bar))
}

/// Replaces every eligible sample of `batch` with a TransMix of itself and a
/// uniformly drawn partner (any other batch member). Ineligible samples are
/// left untouched. Sample `i` draws from ChaCha stream `i` of `seed`, and
/// partners are always taken from the unmixed batch, so the result does not
/// depend on processing order.
pub fn conditional_transmix<P: AttentionProvider + ?Sized>(
    batch: &mut [Sample],
    modality: Modality,
    provider: &P,
    seed: u64,
) -> Result<Vec<MixRecord>> {
    if batch.len() < 2 {
        return Ok(Vec::new());
    }
    let original: Vec<Sample> = batch.to_vec();
    let mut records = Vec::new();
    for (i, anchor) in original.iter().enumerate() {
        if !modality.eligible(anchor.score) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut partner = rng.random_range(0..original.len() - 1);
        if partner >= i {
            partner += 1;
        }
        let b = &original[partner];
        let (mask, image, lambda, y_bar) = transmix_pair(anchor, b, provider, &mut rng)?;
        batch[i].image = image.clone();
        batch[i].score = y_bar;
        records.push(MixRecord {
            anchor: i,
            partner,
            mask,
            lambda,
            y_a: anchor.score,
            y_b: b.score,
            y_bar,
            image,
        });
    }
    Ok(records)
}
