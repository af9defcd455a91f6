//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and enough saved state to run its backward
//! rule; [`Tape::backward`] then walks the nodes once in reverse order,
//! accumulating gradients into every input that requires them.
//!
//! Parameters are borrowed from a [`ParamStore`] rather than copied, so a tape
//! carries the lifetime of the store it reads from.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, MatRef, Tensor};

/// Variance floor used by layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberately broken backward rules, used as negative controls for the
/// gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the GELU derivative by 1.5.
    Gelu,
    /// Scales the sigmoid derivative by 1.5.
    Sigmoid,
    /// Drops the centering term of the softmax backward rule.
    Softmax,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Transpose(Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Conv2d(Box<ConvSaved>),
    Sum(Var),
    Mean(Var),
    WeightedL1 { pred: Var, targets: Vec<f64>, weights: Vec<f64> },
}

struct ConvSaved {
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    stride: usize,
    /// im2col matrix `[out_h*out_w, c_in*k*k]`; empty for the 1×1 stride-1 fast path.
    cols: Vec<f64>,
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Dynamic computation record for one forward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
    grads: Option<Vec<Option<Vec<f64>>>>,
    fault: Option<Fault>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    /// A tape that records gradients for parameters and inputs marked as such.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
            grads: None,
            fault: None,
        }
    }

    /// A tape on which nothing requires gradients; `backward` is rejected.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    #[doc(hidden)]
    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Gradients are tracked when `requires_grad` is set
    /// and the tape is not in inference mode.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Borrows a parameter from `store`. Repeated requests for the same id
    /// return the same node, so gradients from every use accumulate.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(dim_err!("{what} expects a 2-d tensor, got shape {s:?}")),
        }
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err!(
                "matmul inner dimensions differ: {:?} · {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, transpose_b: false },
            &[a, b],
        ))
    }

    /// Matrix product with the second operand transposed: `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_t")?;
        let (n, k2) = self.matrix_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(dim_err!(
                "matmul_t inner dimensions differ: {:?} · {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), n, k).t(),
            &mut out,
            0.0,
        );
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, transpose_b: true },
            &[a, b],
        ))
    }

    /// Adds a bias vector `[d]` to every row of `x[n×d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.matrix_dims(x, "add_bias")?;
        if self.shape(bias) != [d] {
            return Err(dim_err!(
                "bias shape {:?} does not match rows of {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            row.iter_mut().zip(b).for_each(|(o, b)| *o += b);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias { x, bias }, &[x, bias]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what} needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Exact GELU, `x·Φ(x)` with the Gaussian CDF computed through `erf`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * std_normal_cdf(v));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x);
        let d = *value.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(dim_err!("softmax over an empty last dimension"));
        }
        let mut out = value.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let shape = value.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), &[x]))
    }

    /// Normalizes each slice along the last dimension to zero mean and unit
    /// variance, then applies `gamma` and `beta` (both of last-dim length).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err!(
                "layernorm affine shapes {:?}/{:?} do not match last dim of {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        ))
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "transpose")?;
        let out = transpose_data(self.value(x).data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!(
                "narrow(axis {axis}, start {start}, len {len}) out of range for {shape:?}"
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::Narrow { x, axis, start }, &[x]))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(dim_err!(
                    "concat along axis {axis}: shape {s:?} incompatible with {base:?}"
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { inputs: inputs.to_vec(), axis },
            inputs,
        ))
    }

    /// Valid (unpadded) 2-d convolution of `x[C_in×H×W]` with
    /// `kernel[C_out×C_in×k×k]` and an optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (c_in, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(dim_err!("conv2d input must be C×H×W, got {s:?}")),
        };
        let (c_out, kc, k) = match *self.shape(kernel) {
            [o, i, kh, kw] if kh == kw => (o, i, kh),
            ref s => return Err(dim_err!("conv2d kernel must be C_out×C_in×k×k, got {s:?}")),
        };
        if kc != c_in {
            return Err(dim_err!(
                "conv2d kernel {:?} expects {kc} input channels, input {:?} has {c_in}",
                self.shape(kernel),
                self.shape(x)
            ));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d stride must be at least 1"));
        }
        if k > h || k > w {
            return Err(dim_err!(
                "conv2d kernel {:?} larger than input {:?}",
                self.shape(kernel),
                self.shape(x)
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(dim_err!(
                    "conv2d bias shape {:?} does not match {c_out} output channels",
                    self.shape(b)
                ));
            }
        }
        let out_h = (h - k) / stride + 1;
        let out_w = (w - k) / stride + 1;
        let positions = out_h * out_w;
        let patch = c_in * k * k;
        let mut out = vec![0.0; c_out * positions];
        let kmat = MatRef::new(self.value(kernel).data(), c_out, patch);
        let cols = if k == 1 && stride == 1 {
            gemm(kmat, MatRef::new(self.value(x).data(), c_in, positions), &mut out, 0.0);
            Vec::new()
        } else {
            let cols = im2col(self.value(x).data(), c_in, h, w, k, stride, out_h, out_w);
            gemm(kmat, MatRef::new(&cols, positions, patch).t(), &mut out, 0.0);
            cols
        };
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (row, bias) in out.chunks_exact_mut(positions).zip(bv) {
                row.iter_mut().for_each(|o| *o += bias);
            }
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::from_parts(vec![c_out, out_h, out_w], out),
            Op::Conv2d(Box::new(ConvSaved { x, kernel, bias, stride, cols })),
            &inputs,
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// `(1/N) Σ wᵢ·|predᵢ − targetᵢ|` over a prediction vector of length N.
    pub fn weighted_l1(&mut self, pred: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != targets.len() || p.len() != weights.len() {
            return Err(Error::Contract(format!(
                "weighted_l1 length mismatch: {} predictions, {} targets, {} weights",
                p.len(),
                targets.len(),
                weights.len()
            )));
        }
        let n = p.len() as f64;
        let loss = p
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((p, t), w)| w * (t - p).abs())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedL1 {
                pred,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[pred],
        ))
    }

    /// Runs reverse accumulation from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::State("backward on an inference tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.as_ref()?.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    /// Gradients of every parameter used on this tape.
    pub fn param_grads(&self, num_params: usize) -> Gradients {
        let mut out = Gradients::new(num_params);
        if let Some(grads) = &self.grads {
            for (&id, &v) in &self.params {
                if let Some(g) = &grads[v.0] {
                    out.accumulate(id, g, self.shape(v));
                }
            }
        }
        out
    }

    /// Parameter id behind `v`, if it is a parameter leaf.
    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        self.nodes[v.0].param
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (m, k) = dims2(self.shape(*a));
                let n = node.value.shape()[1];
                let gm = MatRef::new(g, m, n);
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(*a, grads) {
                    // da = g · bᵀ (b is k×n) or g · b (b is n×k)
                    let bm = if *transpose_b {
                        MatRef::new(bv, n, k)
                    } else {
                        MatRef::new(bv, k, n).t()
                    };
                    gemm(gm, bm, ga, 1.0);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    let am = MatRef::new(self.value(*a).data(), m, k);
                    if *transpose_b {
                        gemm(gm.t(), am, gb, 1.0);
                    } else {
                        gemm(am.t(), gm, gb, 1.0);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.slot(*x, grads) {
                    axpy(gx, g, 1.0);
                }
                if let Some(gb) = self.slot(*bias, grads) {
                    let d = gb.len();
                    for row in g.chunks_exact(d) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(*v, grads) {
                        axpy(gv, g, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    let bv = self.value(*b).data();
                    for ((o, g), b) in ga.iter_mut().zip(g).zip(bv) {
                        *o += g * b;
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    let av = self.value(*a).data();
                    for ((o, g), a) in gb.iter_mut().zip(g).zip(av) {
                        *o += g * a;
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(gx) = self.slot(*x, grads) {
                    axpy(gx, g, *factor);
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    let xv = self.value(*x).data();
                    for ((o, g), x) in gx.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 {
                            *o += g;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let factor = if self.fault == Some(Fault::Gelu) { 1.5 } else { 1.0 };
                if let Some(gx) = self.slot(*x, grads) {
                    let xv = self.value(*x).data();
                    for ((o, g), &x) in gx.iter_mut().zip(g).zip(xv) {
                        *o += factor * g * gelu_derivative(x);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let factor = if self.fault == Some(Fault::Sigmoid) { 1.5 } else { 1.0 };
                if let Some(gx) = self.slot(*x, grads) {
                    for ((o, g), y) in gx.iter_mut().zip(g).zip(out) {
                        *o += factor * g * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax(x) => {
                let centered = self.fault != Some(Fault::Softmax);
                if let Some(gx) = self.slot(*x, grads) {
                    let d = *node.value.shape().last().unwrap();
                    for ((gx, g), y) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(out.chunks_exact(d)) {
                        let dot = if centered {
                            g.iter().zip(y).map(|(g, y)| g * y).sum::<f64>()
                        } else {
                            0.0
                        };
                        for j in 0..d {
                            gx[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                if let Some(gg) = self.slot(*gamma, grads) {
                    for (g, h) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += g[j] * h[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(*beta, grads) {
                    for row in g.chunks_exact(d) {
                        axpy(gb, row, 1.0);
                    }
                }
                if let Some(gx) = self.slot(*x, grads) {
                    let gamma_v = self.value(*gamma).data();
                    let mut dxhat = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let g = &g[r * d..(r + 1) * d];
                        let h = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g[j] * gamma_v[j];
                        }
                        let sum_d = dxhat.iter().sum::<f64>();
                        let sum_dh = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
                        let gx = &mut gx[r * d..(r + 1) * d];
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            gx[j] += rs * (dxhat[j] - inv_d * sum_d - h[j] * inv_d * sum_dh);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    let (r, c) = dims2(self.shape(*x));
                    let gt = transpose_data(g, c, r);
                    axpy(gx, &gt, 1.0);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    axpy(gx, g, 1.0);
                }
            }
            Op::Narrow { x, axis, start } => {
                if let Some(gx) = self.slot(*x, grads) {
                    let shape = self.shape(*x);
                    let len = node.value.shape()[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    for o in 0..outer {
                        let base = (o * shape[*axis] + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        axpy(&mut gx[base..base + len * inner], src, 1.0);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if let Some(gv) = self.slot(v, grads) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + len];
                            axpy(&mut gv[o * len..(o + 1) * len], src, 1.0);
                        }
                    }
                    offset += len;
                }
            }
            Op::Conv2d(saved) => self.conv2d_backward(saved, node.value.shape(), g, grads),
            Op::Sum(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    let scale = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += scale);
                }
            }
            Op::WeightedL1 { pred, targets, weights } => {
                if let Some(gp) = self.slot(*pred, grads) {
                    let n = targets.len() as f64;
                    let pv = self.value(*pred).data();
                    for (((o, p), t), w) in gp.iter_mut().zip(pv).zip(targets).zip(weights) {
                        let sign = if p > t {
                            1.0
                        } else if p < t {
                            -1.0
                        } else {
                            0.0
                        };
                        *o += g[0] * w * sign / n;
                    }
                }
            }
        }
    }

    fn conv2d_backward(&self, saved: &ConvSaved, out_shape: &[usize], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (c_in, h, w) = dims3(self.shape(saved.x));
        let k = self.shape(saved.kernel)[2];
        let (c_out, out_h, out_w) = (out_shape[0], out_shape[1], out_shape[2]);
        let positions = out_h * out_w;
        let patch = c_in * k * k;
        let gm = MatRef::new(g, c_out, positions);
        let fast = saved.cols.is_empty();
        if let Some(gk) = self.slot(saved.kernel, grads) {
            // dK[c_out×patch] = g · cols
            let cols = if fast {
                MatRef::new(self.value(saved.x).data(), c_in, positions).t()
            } else {
                MatRef::new(&saved.cols, positions, patch)
            };
            gemm(gm, cols, gk, 1.0);
        }
        if let Some(b) = saved.bias {
            if let Some(gb) = self.slot(b, grads) {
                for (o, row) in gb.iter_mut().zip(g.chunks_exact(positions)) {
                    *o += row.iter().sum::<f64>();
                }
            }
        }
        if let Some(gx) = self.slot(saved.x, grads) {
            let kmat = MatRef::new(self.value(saved.kernel).data(), c_out, patch);
            if fast {
                // dx[c_in×HW] = Kᵀ · g
                gemm(kmat.t(), gm, gx, 1.0);
            } else {
                let mut dcols = vec![0.0; positions * patch];
                gemm(gm.t(), kmat, &mut dcols, 0.0);
                col2im_add(&dcols, gx, c_in, h, w, k, saved.stride, out_h, out_w);
            }
        }
    }

    /// Mutable gradient buffer for `v`, allocated on first use; `None` when
    /// `v` does not require gradients.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; numel]))
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    debug_assert_eq!(dst.len(), src.len());
    if alpha == 1.0 {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
    } else {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
    }
}

fn transpose_data(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c_in: usize, h: usize, w: usize, k: usize, stride: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let patch = c_in * k * k;
    let mut cols = vec![0.0; out_h * out_w * patch];
    for oi in 0..out_h {
        for oj in 0..out_w {
            let row = &mut cols[(oi * out_w + oj) * patch..(oi * out_w + oj + 1) * patch];
            let mut idx = 0;
            for c in 0..c_in {
                for ki in 0..k {
                    let src = c * h * w + (oi * stride + ki) * w + oj * stride;
                    row[idx..idx + k].copy_from_slice(&x[src..src + k]);
                    idx += k;
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(cols: &[f64], dx: &mut [f64], c_in: usize, h: usize, w: usize, k: usize, stride: usize, out_h: usize, out_w: usize) {
    let patch = c_in * k * k;
    for oi in 0..out_h {
        for oj in 0..out_w {
            let row = &cols[(oi * out_w + oj) * patch..(oi * out_w + oj + 1) * patch];
            let mut idx = 0;
            for c in 0..c_in {
                for ki in 0..k {
                    let dst = c * h * w + (oi * stride + ki) * w + oj * stride;
                    axpy(&mut dx[dst..dst + k], &row[idx..idx + k], 1.0);
                    idx += k;
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Logistic sigmoid ψ(x) = 1/(1+e^(−x)).
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    std_normal_cdf(x) + x * pdf
}
