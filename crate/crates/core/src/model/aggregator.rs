//! Aggregation of the reassembled region features and the regression head.

use rand::Rng;

use super::config::{AggregatorKind, ModelConfig};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{map_to_tokens, normal_tensor, Conv2d, LayerNorm, Linear, Module, TransformerBlock, INIT_STD};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Aggregator {
    pub kind: AggregatorKind,
    /// 1×1 projection from the encoder width to the aggregator width.
    pub proj: Conv2d,
    pub cls: Option<ParamId>,
    pub pos: Option<ParamId>,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

/// Pooled feature plus the final block's per-head attention, if any.
#[derive(Clone, Debug)]
pub struct AggregatorOutput {
    pub feature: Var,
    pub attention: Vec<Var>,
    pub grid: (usize, usize),
}

impl Aggregator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let agg = &cfg.aggregator;
        let c_in = *cfg.stage_channels.last().unwrap();
        let (gh, gw) = cfg.aggregator_grid()?;
        let patches = gh * gw;
        let proj = Conv2d::new(store, "aggregator.proj", c_in, agg.dim, 1, 1, rng);
        let (cls, pos, blocks) = match agg.kind {
            AggregatorKind::Gap => (None, None, Vec::new()),
            AggregatorKind::Vit | AggregatorKind::Pvt => {
                let with_cls = agg.kind == AggregatorKind::Vit;
                let cls = with_cls.then(|| store.add("aggregator.cls_token", normal_tensor(rng, &[1, agg.dim], INIT_STD)));
                let n = patches + usize::from(with_cls);
                let pos = store.add("aggregator.pos_embed", normal_tensor(rng, &[n, agg.dim], INIT_STD));
                let blocks = (0..agg.depth)
                    .map(|b| TransformerBlock::new(store, &format!("aggregator.block{b}"), agg.dim, agg.heads, 1, rng))
                    .collect::<Result<Vec<_>>>()?;
                (cls, Some(pos), blocks)
            }
        };
        let norm = LayerNorm::new(store, "aggregator.norm", agg.dim);
        Ok(Self {
            kind: agg.kind,
            proj,
            cls,
            pos,
            blocks,
            norm,
        })
    }

    /// `map` is the reassembled `C×gh×gw` feature map.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, map: Var) -> Result<AggregatorOutput> {
        let projected = self.proj.forward(tape, store, map)?;
        let (tokens, grid) = map_to_tokens(tape, projected)?;
        let patches = grid.0 * grid.1;
        let mut attention = Vec::new();
        let feature = match self.kind {
            AggregatorKind::Gap => {
                let pooled = mean_rows(tape, tokens, patches)?;
                self.norm.forward(tape, store, pooled)?
            }
            AggregatorKind::Vit | AggregatorKind::Pvt => {
                let mut x = match self.cls {
                    Some(cls) => {
                        let cls = tape.param(store, cls);
                        tape.concat(&[cls, tokens], 0)?
                    }
                    None => tokens,
                };
                let pos = tape.param(store, self.pos.expect("transformer aggregators own a position table"));
                x = tape.add(x, pos)?;
                let n = tape.shape(x)[0];
                for block in &self.blocks {
                    // r = 1 attention ignores the spatial layout; CLS makes the
                    // sequence non-rectangular anyway.
                    let out = block.forward(tape, store, x, (n, 1))?;
                    x = out.out;
                    attention = out.probs;
                }
                let x = self.norm.forward(tape, store, x)?;
                if self.cls.is_some() {
                    tape.narrow(x, 0, 0, 1)?
                } else {
                    mean_rows(tape, x, patches)?
                }
            }
        };
        Ok(AggregatorOutput { feature, attention, grid })
    }
}

impl Module for Aggregator {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.proj.collect_params(out);
        out.extend(self.cls);
        out.extend(self.pos);
        for b in &self.blocks {
            b.collect_params(out);
        }
        self.norm.collect_params(out);
    }
}

/// Mean over the rows of `x[n×d]`, as `[1×d]`.
fn mean_rows(tape: &mut Tape<'_>, x: Var, n: usize) -> Result<Var> {
    let w = tape.constant(Tensor::full(&[1, n], 1.0 / n as f64));
    tape.matmul(w, x)
}

/// Two fully connected layers from the pooled feature to a scalar.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub output_scale: f64,
}

impl RegressionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, "head.fc1", cfg.aggregator.dim, cfg.head_hidden, rng),
            fc2: Linear::new(store, "head.fc2", cfg.head_hidden, 1, rng),
            output_scale: cfg.output_scale,
        }
    }

    /// `feature[1×d]` to a one-element score.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, feature: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, feature)?;
        let h = tape.gelu(h);
        let y = self.fc2.forward(tape, store, h)?;
        let y = tape.reshape(y, &[1])?;
        Ok(if self.output_scale == 1.0 { y } else { tape.scale(y, self.output_scale) })
    }
}

impl Module for RegressionHead {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.fc1.collect_params(out);
        self.fc2.collect_params(out);
    }
}
