//! The full region-split model: split → per-region encoders → cross-attention
//! gates → reassembly → aggregator → regression head.

pub mod aggregator;
pub mod config;
pub mod encoder;
pub mod gate;
pub mod regions;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use aggregator::{Aggregator, RegressionHead};
pub use config::{AggregatorConfig, AggregatorKind, EncoderKind, ModelConfig, RegionGrid};
pub use encoder::Encoder;
pub use gate::CrossAttentionGate;
pub use regions::{reassemble, split_regions, QuadrantSet, RegionTag};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{cls_attention_map, mean_attention_map, Module};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Vars produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// One-element score.
    pub score: Var,
    /// Gate coefficient map per region, each `1×h×w`.
    pub gates: Vec<Var>,
    /// Per-head attention of the aggregator's last block (empty for GAP).
    pub attention: Vec<Var>,
    /// Aggregator token grid.
    pub grid: (usize, usize),
    /// `(side_h, side_w, channels)` after each encoder stage, per region.
    pub stage_shapes: Vec<Vec<(usize, usize, usize)>>,
}

#[derive(Clone, Debug)]
pub struct QCrossModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoders: Vec<Encoder>,
    pub gates: Vec<CrossAttentionGate>,
    pub aggregator: Aggregator,
    pub head: RegressionHead,
}

impl QCrossModel {
    /// Builds a freshly initialized model. Parameter draws come from a
    /// ChaCha stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let n = config.num_regions;
        let encoders = (0..n)
            .map(|i| Encoder::new(&mut params, &format!("encoder{i}"), &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let c_last = *config.stage_channels.last().unwrap();
        let gates = (0..n)
            .map(|i| CrossAttentionGate::new(&mut params, &format!("gate{i}"), c_last, n - 1, config.cag_intermediate, &mut rng))
            .collect();
        let aggregator = Aggregator::new(&mut params, &config, &mut rng)?;
        let head = RegressionHead::new(&mut params, &config, &mut rng);
        Ok(Self {
            config,
            params,
            encoders,
            gates,
            aggregator,
            head,
        })
    }

    pub fn count_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Forward pass against the model's own parameters.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, image: Var) -> Result<ModelOutput> {
        self.forward_with(tape, &self.params, image)
    }

    /// Forward pass against an external store with the same layout (used by
    /// the finite-difference harness, which perturbs a copy).
    pub fn forward_with<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, image: Var) -> Result<ModelOutput> {
        let cfg = &self.config;
        let expected = [cfg.channels, cfg.input_height, cfg.input_width];
        if tape.shape(image) != expected {
            return Err(dim_err!("model expects input {expected:?}, got {:?}", tape.shape(image)));
        }
        let grid = cfg.region_grid()?;
        let (rh, rw) = cfg.region_size()?;
        // Pixels in [0, 1] are centered to [−1, 1].
        let doubled = tape.scale(image, 2.0);
        let shift = tape.constant(Tensor::full(&expected, -1.0));
        let image = tape.add(doubled, shift)?;

        let mut features = Vec::with_capacity(grid.len());
        let mut stage_shapes = Vec::with_capacity(grid.len());
        for (i, encoder) in self.encoders.iter().enumerate() {
            let (r, c) = (i / grid.cols, i % grid.cols);
            let rows = tape.narrow(image, 1, r * rh, rh)?;
            let region = tape.narrow(rows, 2, c * rw, rw)?;
            let out = encoder.forward(tape, store, region)?;
            features.push(out.map);
            stage_shapes.push(out.stage_shapes);
        }

        let mut gated = Vec::with_capacity(features.len());
        let mut coefficients = Vec::with_capacity(features.len());
        for (i, gate) in self.gates.iter().enumerate() {
            let others: Vec<Var> = features
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &v)| v)
                .collect();
            let out = gate.forward(tape, store, features[i], &others)?;
            gated.push(out.gated);
            coefficients.push(out.coefficients);
        }

        let rows = gated
            .chunks(grid.cols)
            .map(|row| if row.len() == 1 { Ok(row[0]) } else { tape.concat(row, 2) })
            .collect::<Result<Vec<_>>>()?;
        let map = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 1)? };

        let agg = self.aggregator.forward(tape, store, map)?;
        let score = self.head.forward(tape, store, agg.feature)?;
        Ok(ModelOutput {
            score,
            gates: coefficients,
            attention: agg.attention,
            grid: agg.grid,
            stage_shapes,
        })
    }

    /// Gradient-free prediction for one image.
    pub fn predict(&self, image: &Tensor) -> Result<f64> {
        Ok(self.inspect(image)?.score)
    }

    /// Gradient-free prediction together with the patch attention map
    /// (`gh×gw`, sums to one) and the gate coefficient maps.
    pub fn inspect(&self, image: &Tensor) -> Result<Inspection> {
        let mut tape = Tape::inference();
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, x)?;
        let score = tape.value(out.score).data()[0];
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("prediction is {score}")));
        }
        let probs: Vec<Tensor> = out.attention.iter().map(|&v| tape.value(v).clone()).collect();
        let (gh, gw) = out.grid;
        let attention = match self.config.aggregator.kind {
            AggregatorKind::Vit => cls_attention_map(&probs)?,
            AggregatorKind::Pvt => mean_attention_map(&probs)?,
            AggregatorKind::Gap => Tensor::full(&[gh * gw], 1.0 / (gh * gw) as f64),
        }
        .reshape(&[gh, gw])?;
        Ok(Inspection {
            score,
            attention,
            gates: out.gates.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// Predictions for many images, spread over up to `threads` workers.
    /// Results are in input order and do not depend on `threads`.
    pub fn predict_many(&self, images: &[&Tensor], threads: usize) -> Result<Vec<f64>> {
        let threads = threads.clamp(1, images.len().max(1));
        if threads == 1 {
            return images.iter().map(|img| self.predict(img)).collect();
        }
        let chunk = images.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = images
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|img| self.predict(img)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(images.len());
            for h in handles {
                out.extend(h.join().expect("prediction worker panicked")?);
            }
            Ok(out)
        })
    }

    /// Every parameter in module order; each id appears exactly once.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::with_capacity(self.params.len());
        for e in &self.encoders {
            e.collect_params(&mut out);
        }
        for g in &self.gates {
            g.collect_params(&mut out);
        }
        self.aggregator.collect_params(&mut out);
        self.head.collect_params(&mut out);
        out
    }
}

/// Finite-difference check of every parameter tensor of `model`, with the
/// predicted score itself as the loss, on the given input image.
pub fn check_model_gradients(
    model: &QCrossModel,
    image: &Tensor,
    fault: Option<crate::autodiff::Fault>,
) -> Result<Vec<crate::gradcheck::BlockError>> {
    crate::gradcheck::check_parameters(
        &model.params,
        |tape, store| {
            let x = tape.constant(image.clone());
            let out = model.forward_with(tape, store, x)?;
            Ok(tape.sum(out.score))
        },
        crate::gradcheck::PARAM_STEP,
        fault,
    )
}

/// The end-to-end check on a `size`×`size` input: a [`ModelConfig::gradcheck`]
/// model with parameters redrawn from U[−1, 1] and a uniform random image.
pub fn gradcheck_model(size: usize, seed: u64, fault: Option<crate::autodiff::Fault>) -> Result<Vec<crate::gradcheck::BlockError>> {
    let mut model = QCrossModel::new(ModelConfig::gradcheck(size), seed)?;
    crate::gradcheck::randomize_uniform(&mut model.params, seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let image = Tensor::new(&[1, size, size], (0..size * size).map(|_| rng.random::<f64>()).collect())?;
    check_model_gradients(&model, &image, fault)
}

/// Result of [`QCrossModel::inspect`].
#[derive(Clone, Debug)]
pub struct Inspection {
    pub score: f64,
    pub attention: Tensor,
    pub gates: Vec<Tensor>,
}

/// Worker count from `QUADGATE_THREADS`, defaulting to 1.
pub fn thread_count() -> usize {
    std::env::var("QUADGATE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Prediction-mean ensemble.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<QCrossModel>,
}

impl Ensemble {
    pub fn new(members: Vec<QCrossModel>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Contract("an ensemble needs at least one member".into()))?;
        let input = (first.config.channels, first.config.input_height, first.config.input_width);
        for m in &members[1..] {
            let other = (m.config.channels, m.config.input_height, m.config.input_width);
            if other != input {
                return Err(Error::Contract(format!(
                    "ensemble members disagree on input: {input:?} vs {other:?}"
                )));
            }
        }
        Ok(Self { members })
    }

    pub fn predict(&self, image: &Tensor) -> Result<f64> {
        let preds = self
            .members
            .iter()
            .map(|m| m.predict(image))
            .collect::<Result<Vec<_>>>()?;
        mean_prediction(&preds)
    }
}

/// Arithmetic mean of member predictions.
pub fn mean_prediction(preds: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Contract("cannot average an empty set of predictions".into()));
    }
    Ok(preds.iter().sum::<f64>() / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [cfg.channels, cfg.input_height, cfg.input_width];
        let n = shape.iter().product();
        Tensor::new(&shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig::gradcheck(16)
    }

    #[test]
    fn forward_is_finite_and_deterministic() {
        let model = QCrossModel::new(small(), 1).unwrap();
        let x = random_image(&model.config, 2);
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x).unwrap();
        assert!(a.is_finite());
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn desk_stage_shapes_match_law() {
        let cfg = ModelConfig::desk();
        let model = QCrossModel::new(cfg.clone(), 3).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(random_image(&cfg, 4));
        let out = model.forward(&mut tape, x).unwrap();
        let expected = cfg.stage_shapes().unwrap();
        assert_eq!(expected, vec![(8, 8, 32), (4, 4, 64), (2, 2, 160), (1, 1, 256)]);
        for shapes in &out.stage_shapes {
            assert_eq!(shapes, &expected);
        }
        // Four 1×1 maps → 2×2 grid → 4 patches + CLS.
        assert_eq!(out.grid, (2, 2));
        assert_eq!(tape.shape(out.attention[0]), &[5, 5]);
    }

    #[test]
    fn swapping_quadrants_changes_output() {
        let cfg = small();
        let model = QCrossModel::new(cfg.clone(), 5).unwrap();
        let x = random_image(&cfg, 6);
        let sets = split_regions(&x, 4).unwrap();
        let mut swapped = sets.clone();
        let tl = swapped.regions[0].1.clone();
        swapped.regions[0].1 = swapped.regions[3].1.clone();
        swapped.regions[3].1 = tl;
        let y = reassemble(&swapped).unwrap();
        assert_ne!(model.predict(&x).unwrap(), model.predict(&y).unwrap());
    }

    #[test]
    fn region_variants_run() {
        for (n, w) in [(2, 16), (4, 16), (6, 24)] {
            let mut cfg = small();
            cfg.num_regions = n;
            cfg.input_width = w;
            cfg.sra_ratios = vec![2, 1, 1, 1];
            let model = QCrossModel::new(cfg.clone(), 7).unwrap();
            let inspect = model.inspect(&random_image(&cfg, 8)).unwrap();
            assert!(inspect.score.is_finite());
            assert_eq!(inspect.gates.len(), n);
            assert!((inspect.attention.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregator_and_encoder_variants_run() {
        for (enc, agg) in [
            (EncoderKind::Vit, AggregatorKind::Pvt),
            (EncoderKind::Pvt, AggregatorKind::Gap),
            (EncoderKind::Vit, AggregatorKind::Vit),
        ] {
            let mut cfg = small();
            cfg.encoder_kind = enc;
            cfg.aggregator.kind = agg;
            let model = QCrossModel::new(cfg.clone(), 9).unwrap();
            let inspect = model.inspect(&random_image(&cfg, 10)).unwrap();
            assert!(inspect.score.is_finite(), "{enc:?}/{agg:?}");
            assert_eq!(inspect.attention.shape(), &[2, 2]);
        }
    }

    #[test]
    fn gate_coefficients_are_open_unit() {
        let model = QCrossModel::new(small(), 11).unwrap();
        let inspect = model.inspect(&random_image(&model.config, 12)).unwrap();
        for g in &inspect.gates {
            assert!(g.data().iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let model = QCrossModel::new(small(), 13).unwrap();
        assert!(matches!(model.predict(&Tensor::zeros(&[1, 8, 8])), Err(Error::Dimension(_))));
    }

    #[test]
    fn param_ids_cover_store_once() {
        let model = QCrossModel::new(small(), 14).unwrap();
        let mut ids: Vec<usize> = model.param_ids().iter().map(|p| p.index()).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..model.params.len()).collect::<Vec<_>>());
    }

    #[test]
    fn predict_many_matches_sequential() {
        let model = QCrossModel::new(small(), 15).unwrap();
        let images: Vec<Tensor> = (0..5).map(|s| random_image(&model.config, 100 + s)).collect();
        let refs: Vec<&Tensor> = images.iter().collect();
        let seq = model.predict_many(&refs, 1).unwrap();
        let par = model.predict_many(&refs, 3).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn ensemble_means() {
        assert_eq!(mean_prediction(&[2.0, 4.0, 6.0]).unwrap(), 4.0);
        assert!(matches!(mean_prediction(&[]), Err(Error::Contract(_))));
        assert!(matches!(Ensemble::new(vec![]), Err(Error::Contract(_))));

        let model = QCrossModel::new(small(), 16).unwrap();
        let x = random_image(&model.config, 17);
        let single = model.predict(&x).unwrap();
        let one = Ensemble::new(vec![model.clone()]).unwrap();
        assert_eq!(one.predict(&x).unwrap(), single);
        let three = Ensemble::new(vec![model.clone(), model.clone(), model]).unwrap();
        assert!((three.predict(&x).unwrap() - single).abs() < 1e-15);
    }

    #[test]
    fn paper_scale_count_reported() {
        let model = QCrossModel::new(ModelConfig::paper(), 0).unwrap();
        let n = model.count_params();
        // Four independent encoders plus gates and aggregator; the exact total
        // depends on undocumented aggregator/head sizes, so only sanity-bound it.
        assert!(n > 10_000_000 && n < 60_000_000, "{n}");
    }
}
