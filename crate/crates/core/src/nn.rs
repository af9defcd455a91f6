//! Parameterized layers: linear maps, layer norm, patch embedding,
//! multi-head attention with optional spatial reduction, and pre-norm
//! transformer blocks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// MLP hidden width as a multiple of the token width.
pub const MLP_RATIO: usize = 4;

/// Anything that owns parameters in a [`ParamStore`].
pub trait Module {
    /// Appends the ids of every parameter this module owns.
    fn collect_params(&self, out: &mut Vec<ParamId>);
}

pub(crate) fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// `y = x·Wᵀ + b` on token matrices `[n × in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut l = Self::without_bias(store, name, in_dim, out_dim, rng);
        l.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        l
    }

    pub fn without_bias<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), normal_tensor(rng, &[out_dim, in_dim], INIT_STD));
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul_t(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.push(self.weight);
        out.extend(self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layernorm(x, g, b)
    }
}

impl Module for LayerNorm {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.extend([self.gamma, self.beta]);
    }
}

/// A convolution with bias, on `C×H×W` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            kernel: store.add(format!("{name}.kernel"), normal_tensor(rng, &[c_out, c_in, k, k], INIT_STD)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, k, Some(b), self.stride)
    }
}

impl Module for Conv2d {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.extend([self.kernel, self.bias]);
    }
}

/// `[C × h × w]` map to `[h·w × C]` tokens.
pub fn map_to_tokens(tape: &mut Tape<'_>, x: Var) -> Result<(Var, (usize, usize))> {
    let (c, h, w) = match *tape.shape(x) {
        [c, h, w] => (c, h, w),
        ref s => return Err(dim_err!("expected a C×H×W map, got {s:?}")),
    };
    let flat = tape.reshape(x, &[c, h * w])?;
    Ok((tape.transpose(flat)?, (h, w)))
}

/// `[h·w × C]` tokens back to a `[C × h × w]` map.
pub fn tokens_to_map(tape: &mut Tape<'_>, tokens: Var, (h, w): (usize, usize)) -> Result<Var> {
    let (n, c) = match *tape.shape(tokens) {
        [n, c] => (n, c),
        ref s => return Err(dim_err!("expected n×C tokens, got {s:?}")),
    };
    if n != h * w {
        return Err(dim_err!("{n} tokens cannot form a {h}×{w} map"));
    }
    let t = tape.transpose(tokens)?;
    tape.reshape(t, &[c, h, w])
}

/// Non-overlapping `P×P` patch projection followed by layer norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch_size: usize,
    pub proj: Conv2d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, patch_size: usize, rng: &mut R) -> Self {
        Self {
            patch_size,
            proj: Conv2d::new(store, &format!("{name}.proj"), c_in, c_out, patch_size, patch_size, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), c_out),
        }
    }

    /// Returns `(h/P)·(w/P)` tokens and the token grid.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<(Var, (usize, usize))> {
        if let [_, h, w] = *tape.shape(x) {
            if h % self.patch_size != 0 || w % self.patch_size != 0 {
                return Err(Error::Config(format!(
                    "input {h}×{w} is not divisible by patch size {}",
                    self.patch_size
                )));
            }
        }
        let y = self.proj.forward(tape, store, x)?;
        let (tokens, grid) = map_to_tokens(tape, y)?;
        Ok((self.norm.forward(tape, store, tokens)?, grid))
    }
}

impl Module for PatchEmbed {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.proj.collect_params(out);
        self.norm.collect_params(out);
    }
}

/// Key/value downsampling of spatial-reduction attention.
#[derive(Clone, Debug)]
pub struct SpatialReduction {
    pub ratio: usize,
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

/// Result of an attention layer: the projected output plus the per-head
/// attention probabilities `[n_queries × n_keys]`.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub probs: Vec<Var>,
}

/// Multi-head attention; with a reduction ratio above 1 keys and values come
/// from an `r×r` stride-`r` convolution of the token map (spatial-reduction
/// attention), otherwise it is plain multi-head self-attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub reduction: Option<SpatialReduction>,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        if ratio == 0 {
            return Err(Error::Config("reduction ratio must be at least 1".into()));
        }
        let q = Linear::new(store, &format!("{name}.q"), dim, dim, rng);
        // A key bias only shifts every score in a row equally, which softmax
        // cancels; it would be a parameter with identically zero gradient.
        let k = Linear::without_bias(store, &format!("{name}.k"), dim, dim, rng);
        let v = Linear::new(store, &format!("{name}.v"), dim, dim, rng);
        let proj = Linear::new(store, &format!("{name}.proj"), dim, dim, rng);
        let reduction = (ratio > 1).then(|| SpatialReduction {
            ratio,
            conv: Conv2d::new(store, &format!("{name}.sr"), dim, dim, ratio, ratio, rng),
            norm: LayerNorm::new(store, &format!("{name}.sr_norm"), dim),
        });
        Ok(Self {
            heads,
            dim,
            q,
            k,
            v,
            proj,
            reduction,
        })
    }

    pub fn ratio(&self) -> usize {
        self.reduction.as_ref().map_or(1, |r| r.ratio)
    }

    /// Attention over `tokens[n×dim]` laid out on a `h×w` grid.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        tokens: Var,
        spatial: (usize, usize),
    ) -> Result<AttentionOutput> {
        let kv_src = match &self.reduction {
            None => tokens,
            Some(sr) => {
                let (h, w) = spatial;
                if h % sr.ratio != 0 || w % sr.ratio != 0 {
                    return Err(Error::Config(format!(
                        "token grid {h}×{w} is not divisible by reduction ratio {}",
                        sr.ratio
                    )));
                }
                let map = tokens_to_map(tape, tokens, spatial)?;
                let reduced = sr.conv.forward(tape, store, map)?;
                let (kv, _) = map_to_tokens(tape, reduced)?;
                sr.norm.forward(tape, store, kv)?
            }
        };
        self.attend(tape, store, tokens, kv_src)
    }

    /// Scaled dot-product attention with queries from `q_src` and keys/values
    /// from `kv_src`.
    pub fn attend<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, q_src: Var, kv_src: Var) -> Result<AttentionOutput> {
        let q = self.q.forward(tape, store, q_src)?;
        let k = self.k.forward(tape, store, kv_src)?;
        let v = self.v.forward(tape, store, kv_src)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut probs = Vec::with_capacity(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.narrow(q, 1, h * head_dim, head_dim)?,
                    tape.narrow(k, 1, h * head_dim, head_dim)?,
                    tape.narrow(v, 1, h * head_dim, head_dim)?,
                )
            };
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let p = tape.softmax(scores)?;
            outs.push(tape.matmul(p, vh)?);
            probs.push(p);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        let out = self.proj.forward(tape, store, merged)?;
        Ok(AttentionOutput { out, probs })
    }
}

impl Module for Attention {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        for l in [&self.q, &self.k, &self.v, &self.proj] {
            l.collect_params(out);
        }
        if let Some(sr) = &self.reduction {
            sr.conv.collect_params(out);
            sr.norm.collect_params(out);
        }
    }
}

/// Pre-norm block: `x + attn(norm(x))`, then `+ mlp(norm(·))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, ratio, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, dim * MLP_RATIO, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), dim * MLP_RATIO, dim, rng),
        })
    }

    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        tokens: Var,
        spatial: (usize, usize),
    ) -> Result<AttentionOutput> {
        let shape = tape.shape(tokens).to_vec();
        if shape.len() != 2 || shape[1] != self.attn.dim {
            return Err(dim_err!("block of width {} got tokens {shape:?}", self.attn.dim));
        }
        let normed = self.norm1.forward(tape, store, tokens)?;
        let attn = self.attn.forward(tape, store, normed, spatial)?;
        let x = tape.add(tokens, attn.out)?;
        let normed = self.norm2.forward(tape, store, x)?;
        let hidden = self.fc1.forward(tape, store, normed)?;
        let hidden = tape.gelu(hidden);
        let mlp = self.fc2.forward(tape, store, hidden)?;
        let out = tape.add(x, mlp)?;
        if tape.shape(out) != shape.as_slice() {
            return Err(dim_err!("block changed token shape {shape:?} to {:?}", tape.shape(out)));
        }
        Ok(AttentionOutput {
            out,
            probs: attn.probs,
        })
    }
}

impl Module for TransformerBlock {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.norm1.collect_params(out);
        self.attn.collect_params(out);
        self.norm2.collect_params(out);
        self.fc1.collect_params(out);
        self.fc2.collect_params(out);
    }
}

/// CLS-to-patch attention of the final block: row 0 of every head's
/// probabilities, averaged over heads, with the CLS column dropped and the
/// rest renormalized to sum to one.
pub fn cls_attention_map(head_probs: &[Tensor]) -> Result<Tensor> {
    let first = head_probs
        .first()
        .ok_or_else(|| Error::State("no attention probabilities were recorded".into()))?;
    let (n_q, n_k) = match *first.shape() {
        [q, k] => (q, k),
        ref s => return Err(dim_err!("attention probabilities must be 2-d, got {s:?}")),
    };
    if n_q == 0 || n_k < 2 {
        return Err(dim_err!("attention map {n_q}×{n_k} has no patch columns"));
    }
    let mut avg = vec![0.0; n_k - 1];
    for p in head_probs {
        if p.shape() != first.shape() {
            return Err(dim_err!("head maps disagree: {:?} vs {:?}", p.shape(), first.shape()));
        }
        for (a, v) in avg.iter_mut().zip(&p.data()[1..n_k]) {
            *a += v;
        }
    }
    normalize_map(avg)
}

/// Attention received by each key, averaged over queries and heads, then
/// renormalized. Used by aggregators without a CLS token.
pub fn mean_attention_map(head_probs: &[Tensor]) -> Result<Tensor> {
    let first = head_probs
        .first()
        .ok_or_else(|| Error::State("no attention probabilities were recorded".into()))?;
    let n_k = *first.shape().last().unwrap_or(&0);
    let mut avg = vec![0.0; n_k];
    for p in head_probs {
        for row in p.data().chunks_exact(n_k) {
            for (a, v) in avg.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    normalize_map(avg)
}

fn normalize_map(mut values: Vec<f64>) -> Result<Tensor> {
    let total: f64 = values.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::NonFinite(format!("attention mass {total} cannot be normalized")));
    }
    values.iter_mut().for_each(|v| *v /= total);
    let n = values.len();
    Tensor::new(&[n], values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_parameters, randomize_uniform, PARAM_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn random_tokens(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_el = n * d;
        Tensor::new(&[n, d], (0..n_el).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Multi-head attention computed with plain loops, independent of the tape.
    fn reference_mha(store: &ParamStore, attn: &Attention, x: &Tensor) -> Vec<f64> {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let lin = |l: &Linear, input: &[f64]| -> Vec<f64> {
            let w = store.get(l.weight).data();
            let mut out = vec![0.0; n * l.out_dim];
            for i in 0..n {
                for o in 0..l.out_dim {
                    let mut acc = l.bias.map_or(0.0, |b| store.get(b).data()[o]);
                    for j in 0..l.in_dim {
                        acc += input[i * l.in_dim + j] * w[o * l.in_dim + j];
                    }
                    out[i * l.out_dim + o] = acc;
                }
            }
            out
        };
        let (q, k, v) = (lin(&attn.q, x.data()), lin(&attn.k, x.data()), lin(&attn.v, x.data()));
        let hd = d / attn.heads;
        let mut merged = vec![0.0; n * d];
        for h in 0..attn.heads {
            for i in 0..n {
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| (0..hd).map(|c| q[i * d + h * hd + c] * k[j * d + h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter_mut().map(|s| {
                    *s = (*s - m).exp();
                    *s
                }).sum();
                for j in 0..n {
                    for c in 0..hd {
                        merged[i * d + h * hd + c] += scores[j] / z * v[j * d + h * hd + c];
                    }
                }
            }
        }
        lin(&attn.proj, &merged)
    }

    #[test]
    fn ratio_one_is_plain_mha() {
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 8, 2, 1, &mut rng()).unwrap();
        assert!(attn.reduction.is_none());
        let x = random_tokens(16, 8, 1);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let out = attn.forward(&mut tape, &store, xv, (4, 4)).unwrap();
        let plain = attn.attend(&mut tape, &store, xv, xv).unwrap();
        assert_eq!(tape.value(out.out), tape.value(plain.out));
        let reference = reference_mha(&store, &attn, &x);
        for (a, b) in tape.value(out.out).data().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sra_reduces_keys() {
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 8, 2, 8, &mut rng()).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(random_tokens(56 * 56, 8, 2));
        let out = attn.forward(&mut tape, &store, x, (56, 56)).unwrap();
        assert_eq!(tape.shape(out.out), &[3136, 8]);
        for p in &out.probs {
            assert_eq!(tape.shape(*p), &[3136, 49]);
            for row in tape.value(*p).data().chunks(49) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn sra_indivisible_grid_is_config_error() {
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 4, 1, 2, &mut rng()).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(random_tokens(9, 4, 3));
        assert!(matches!(attn.forward(&mut tape, &store, x, (3, 3)), Err(Error::Config(_))));
        assert!(matches!(Attention::new(&mut store, "b", 6, 4, 1, &mut rng()), Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_block_is_identity() {
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "blk", 8, 2, 2, &mut rng()).unwrap();
        for id in [block.attn.proj.weight, block.attn.proj.bias.unwrap(), block.fc2.weight, block.fc2.bias.unwrap()] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let x = random_tokens(16, 8, 4);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let out = block.forward(&mut tape, &store, xv, (4, 4)).unwrap();
        assert_eq!(tape.value(out.out), &x);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "blk", 4, 2, 2, &mut rng()).unwrap();
        randomize_uniform(&mut store, 100);
        let x = random_tokens(16, 4, 9);
        let reports = check_parameters(
            &store,
            |tape, s| {
                let xv = tape.constant(x.clone());
                let out = block.forward(tape, s, xv, (4, 4))?;
                let sq = tape.mul(out.out, out.out)?;
                Ok(tape.mean(sq))
            },
            PARAM_STEP,
            None,
        )
        .unwrap();
        for r in reports {
            assert!(r.max_relative_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn parameters_enumerated_once() {
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "blk", 8, 2, 2, &mut rng()).unwrap();
        let mut ids = Vec::new();
        block.collect_params(&mut ids);
        ids.sort();
        let all: Vec<_> = store.ids().collect();
        assert_eq!(ids, all);
    }

    #[test]
    fn patch_embed_token_count() {
        let mut store = ParamStore::new();
        let pe = PatchEmbed::new(&mut store, "pe", 1, 8, 4, &mut rng());
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::ones(&[1, 32, 16]));
        let (tokens, grid) = pe.forward(&mut tape, &store, x).unwrap();
        assert_eq!(grid, (8, 4));
        assert_eq!(tape.shape(tokens), &[32, 8]);
        let bad = tape.constant(Tensor::ones(&[1, 30, 16]));
        assert!(matches!(pe.forward(&mut tape, &store, bad), Err(Error::Config(_))));
    }

    #[test]
    fn cls_map_cases() {
        let uniform = Tensor::full(&[5, 5], 0.2);
        let m = cls_attention_map(&[uniform]).unwrap();
        for v in m.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        // CLS column zero so only patch columns carry mass.
        let h1 = Tensor::new(&[3, 3], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let h2 = Tensor::new(&[3, 3], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = cls_attention_map(&[h1, h2]).unwrap();
        assert_eq!(m.data(), &[0.5, 0.5]);
        assert!(matches!(cls_attention_map(&[]), Err(Error::State(_))));
    }
}
