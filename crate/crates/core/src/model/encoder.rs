//! Per-region backbones.

use rand::Rng;

use super::config::{EncoderKind, ModelConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::nn::{normal_tensor, tokens_to_map, LayerNorm, Module, PatchEmbed, TransformerBlock, INIT_STD};
use crate::params::{ParamId, ParamStore};

/// One pyramid stage: patch embedding, learned positions, blocks.
#[derive(Clone, Debug)]
pub struct PvtStage {
    pub embed: PatchEmbed,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    /// Only the last stage normalizes its output.
    pub norm: Option<LayerNorm>,
}

/// Output of an encoder: the final `C×h×w` map and the shape reached after
/// every stage.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub map: Var,
    pub stage_shapes: Vec<(usize, usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub kind: EncoderKind,
    pub stages: Vec<PvtStage>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (h, w) = cfg.region_size()?;
        let stages = match cfg.encoder_kind {
            EncoderKind::Pvt => {
                let mut stages = Vec::with_capacity(cfg.num_stages());
                let mut c_in = cfg.channels;
                let last = cfg.num_stages() - 1;
                for k in 0..cfg.num_stages() {
                    let patch = if k == 0 { cfg.patch_size } else { 2 };
                    let c = cfg.stage_channels[k];
                    let div = cfg.patch_size << k;
                    let tokens = (h / div) * (w / div);
                    let prefix = format!("{name}.stage{}", k + 1);
                    let embed = PatchEmbed::new(store, &format!("{prefix}.patch_embed"), c_in, c, patch, rng);
                    let pos = store.add(format!("{prefix}.pos_embed"), normal_tensor(rng, &[tokens, c], INIT_STD));
                    let blocks = (0..cfg.stage_depths[k])
                        .map(|b| {
                            TransformerBlock::new(
                                store,
                                &format!("{prefix}.block{b}"),
                                c,
                                cfg.stage_heads[k],
                                cfg.sra_ratios[k],
                                rng,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let norm = (k == last).then(|| LayerNorm::new(store, &format!("{prefix}.norm"), c));
                    stages.push(PvtStage { embed, pos, blocks, norm });
                    c_in = c;
                }
                stages
            }
            EncoderKind::Vit => {
                // One stage whose patch covers the whole pyramid stride, so the
                // output grid and width match the last pyramid stage.
                let patch = cfg.total_stride();
                let c = *cfg.stage_channels.last().unwrap();
                let heads = *cfg.stage_heads.last().unwrap();
                let depth: usize = cfg.stage_depths.iter().sum();
                let tokens = (h / patch) * (w / patch);
                let prefix = format!("{name}.vit");
                let embed = PatchEmbed::new(store, &format!("{prefix}.patch_embed"), cfg.channels, c, patch, rng);
                let pos = store.add(format!("{prefix}.pos_embed"), normal_tensor(rng, &[tokens, c], INIT_STD));
                let blocks = (0..depth)
                    .map(|b| TransformerBlock::new(store, &format!("{prefix}.block{b}"), c, heads, 1, rng))
                    .collect::<Result<Vec<_>>>()?;
                let norm = Some(LayerNorm::new(store, &format!("{prefix}.norm"), c));
                vec![PvtStage { embed, pos, blocks, norm }]
            }
        };
        Ok(Self {
            kind: cfg.encoder_kind,
            stages,
        })
    }

    /// Encodes one `C×H×W` region into the final feature map.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, region: Var) -> Result<EncoderOutput> {
        let mut x = region;
        let mut stage_shapes = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (tokens, grid) = stage.embed.forward(tape, store, x)?;
            let pos = tape.param(store, stage.pos);
            if tape.shape(pos) != tape.shape(tokens) {
                return Err(dim_err!(
                    "positional table {:?} does not match tokens {:?}",
                    tape.shape(pos),
                    tape.shape(tokens)
                ));
            }
            let mut t = tape.add(tokens, pos)?;
            for block in &stage.blocks {
                t = block.forward(tape, store, t, grid)?.out;
            }
            if let Some(norm) = &stage.norm {
                t = norm.forward(tape, store, t)?;
            }
            x = tokens_to_map(tape, t, grid)?;
            let s = tape.shape(x);
            stage_shapes.push((s[1], s[2], s[0]));
        }
        Ok(EncoderOutput { map: x, stage_shapes })
    }
}

impl Module for Encoder {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        for stage in &self.stages {
            stage.embed.collect_params(out);
            out.push(stage.pos);
            for b in &stage.blocks {
                b.collect_params(out);
            }
            if let Some(n) = &stage.norm {
                n.collect_params(out);
            }
        }
    }
}
