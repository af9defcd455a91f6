//! Surrogate severity task: dark images with bright elliptical blobs whose
//! score is the bright-pixel fraction times the modality's range maximum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::scores::Modality;
use crate::tensor::Tensor;

pub const BACKGROUND: f64 = 0.1;
pub const FOREGROUND: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Images are `side×side`.
    pub side: usize,
    pub modality: Modality,
    /// Up to this many ellipses seed the bright region.
    pub max_blobs: usize,
    /// Uniform noise amplitude added to every pixel.
    pub noise: f64,
    /// Shape of the target score distribution. CIP: `80·u^skew` (mostly low);
    /// GE: `8·(1 − u^skew)` (mostly high); LO: `8 × mean of skew uniforms`
    /// (mostly central).
    pub skew: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(count: usize, side: usize, modality: Modality, seed: u64) -> Self {
        Self {
            count,
            side,
            modality,
            max_blobs: 3,
            noise: 0.05,
            skew: match modality {
                Modality::Cip => 4.0,
                Modality::Ge | Modality::Lo => 3.0,
            },
            seed,
        }
    }

    /// Bright-pixel count for a target score, on the modality's grid.
    fn pixel_count(&self, target: f64) -> usize {
        let total = (self.side * self.side) as f64;
        let target = match self.modality {
            Modality::Cip => target,
            Modality::Ge | Modality::Lo => self.modality.nearest_level(target),
        };
        ((target / self.modality.range_max() * total).round() as usize).min(self.side * self.side)
    }

    fn draw_target<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let max = self.modality.range_max();
        match self.modality {
            Modality::Cip => 80.0 * rng.random::<f64>().powf(self.skew),
            Modality::Ge => max * (1.0 - rng.random::<f64>().powf(self.skew)),
            Modality::Lo => {
                let n = self.skew.round().max(1.0) as usize;
                max * (0..n).map(|_| rng.random::<f64>()).sum::<f64>() / n as f64
            }
        }
    }
}

/// Generates `spec.count` samples. Sample `i` uses ChaCha stream `i` of
/// `spec.seed`, so a sample does not depend on how many others are drawn.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Vec<Sample> {
    (0..spec.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let target = spec.draw_target(&mut rng);
            let bright = spec.pixel_count(target);
            let (image, counted) = render(spec, bright, &mut rng);
            let total = (spec.side * spec.side) as f64;
            Sample {
                id: format!("s{i:05}"),
                image,
                score: counted as f64 / total * spec.modality.range_max(),
            }
        })
        .collect()
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

/// Lights exactly `bright` pixels: those with the smallest normalized
/// distance to any of the random ellipses. Returns the image and the number of
/// bright pixels it contains.
fn render<R: Rng + ?Sized>(spec: &SyntheticSpec, bright: usize, rng: &mut R) -> (Tensor, usize) {
    let s = spec.side;
    let sf = s as f64;
    let n_blobs = rng.random_range(1..=spec.max_blobs.max(1));
    let blobs: Vec<Ellipse> = (0..n_blobs)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                cy: rng.random_range(0.0..sf),
                cx: rng.random_range(0.0..sf),
                a: rng.random_range(sf / 12.0..=sf / 4.0),
                b: rng.random_range(sf / 12.0..=sf / 4.0),
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect();
    let mut order: Vec<(f64, usize)> = (0..s * s)
        .map(|p| {
            let (y, x) = ((p / s) as f64 + 0.5, (p % s) as f64 + 0.5);
            let rho = blobs.iter().map(|e| e.radius(y, x)).fold(f64::INFINITY, f64::min);
            (rho, p)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut mask = vec![false; s * s];
    for &(_, p) in &order[..bright] {
        mask[p] = true;
    }
    let data = mask
        .iter()
        .map(|&on| {
            let base = if on { FOREGROUND } else { BACKGROUND };
            let jitter = if spec.noise > 0.0 {
                rng.random_range(-spec.noise..=spec.noise)
            } else {
                0.0
            };
            (base + jitter).clamp(0.0, 1.0)
        })
        .collect();
    let counted = mask.iter().filter(|&&on| on).count();
    (Tensor::new(&[1, s, s], data).expect("side² pixels"), counted)
}
