//! Central finite-difference checks of tape gradients.

use crate::autodiff::{Fault, Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step used by the per-operation checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Step used by the five-point parameter checks.
pub const PARAM_STEP: f64 = 1e-4;

/// Gradients below this fraction of the largest gradient anywhere in the
/// store are compared against that floor instead of their own size.
pub const ZERO_FLOOR: f64 = 1e-6;

/// Pass threshold for the per-coordinate relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Max over coordinates of `|a − n| / max(|a|, |n|, 1e-12)`. Any NaN yields `+∞`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if !a.is_finite() || !n.is_finite() {
            return f64::INFINITY;
        }
        let denom = a.abs().max(n.abs()).max(1e-12);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// `max|a − n| / max(max|a|, max|n|, floor)`: error relative to the largest
/// gradient in the block, so near-zero coordinates don't dominate. Any NaN
/// yields `+∞`.
pub fn block_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let (mut diff, mut scale): (f64, f64) = (0.0, 0.0);
    for (&a, &n) in analytic.iter().zip(numeric) {
        if !a.is_finite() || !n.is_finite() {
            return f64::INFINITY;
        }
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    diff / scale.max(floor).max(1e-300)
}

fn scalar_output(tape: &Tape<'_>, out: Var) -> Option<f64> {
    tape.value(out).item().filter(|v| v.is_finite())
}

/// Compares the tape gradient of a scalar-valued `f` at `x` against central
/// differences with the given `step`. Returns the maximum relative error, or
/// `+∞` if `f` fails or produces a non-finite value.
pub fn finite_diff_check<'a, F>(f: F, x: &Tensor, step: f64) -> f64
where
    F: Fn(&mut Tape<'a>, Var) -> Result<Var>,
{
    finite_diff_check_with(f, x, step, None)
}

#[doc(hidden)]
pub fn finite_diff_check_with<'a, F>(f: F, x: &Tensor, step: f64, fault: Option<Fault>) -> f64
where
    F: Fn(&mut Tape<'a>, Var) -> Result<Var>,
{
    let mut tape = match fault {
        Some(fault) => Tape::new().with_fault(fault),
        None => Tape::new(),
    };
    let input = tape.leaf(x.clone(), true);
    let Ok(out) = f(&mut tape, input) else {
        return f64::INFINITY;
    };
    if scalar_output(&tape, out).is_none() || tape.backward(out).is_err() {
        return f64::INFINITY;
    }
    let analytic = match tape.grad(input) {
        Some(g) => g.into_data(),
        None => vec![0.0; x.numel()],
    };

    let eval = |probe: &Tensor| -> Option<f64> {
        let mut tape = Tape::inference();
        let input = tape.leaf(probe.clone(), false);
        let out = f(&mut tape, input).ok()?;
        scalar_output(&tape, out)
    };
    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe);
        probe.data_mut()[i] = orig;
        match (plus, minus) {
            (Some(p), Some(m)) => numeric.push((p - m) / (2.0 * step)),
            _ => return f64::INFINITY,
        }
    }
    max_relative_error(&analytic, &numeric)
}

/// Redraws every parameter from U[−1, 1]. Gradient checks run at such points
/// because small initial weights leave many gradients near the rounding floor.
pub fn randomize_uniform(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

/// Worst relative error for one parameter tensor.
#[derive(Clone, Debug)]
pub struct BlockError {
    pub name: String,
    pub shape: Vec<usize>,
    pub max_relative_error: f64,
}

impl BlockError {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Checks the gradient of a scalar `loss` with respect to every parameter in
/// `store`, one report per parameter tensor in registration order. Numeric
/// gradients use a five-point stencil; errors are measured per block with
/// [`block_relative_error`], floored at [`ZERO_FLOOR`] times the largest
/// analytic gradient in the store.
pub fn check_parameters<F>(store: &ParamStore, loss: F, step: f64, fault: Option<Fault>) -> Result<Vec<BlockError>>
where
    F: for<'s> Fn(&mut Tape<'s>, &'s ParamStore) -> Result<Var>,
{
    let mut tape = match fault {
        Some(fault) => Tape::new().with_fault(fault),
        None => Tape::new(),
    };
    let out = loss(&mut tape, store)?;
    tape.backward(out)?;
    let grads = tape.param_grads(store.len());
    drop(tape);
    let global = store
        .ids()
        .filter_map(|id| grads.get(id))
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));

    let eval = |s: &ParamStore| -> Option<f64> {
        let mut tape = Tape::inference();
        let out = loss(&mut tape, s).ok()?;
        scalar_output(&tape, out)
    };
    let mut probe = store.clone();
    let mut reports = Vec::with_capacity(store.len());
    for id in store.ids() {
        let numel = store.get(id).numel();
        let analytic = grads
            .get(id)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; numel]);
        let numeric = central_differences(&mut probe, id, step, &eval);
        let err = match numeric {
            Some(numeric) => block_relative_error(&analytic, &numeric, ZERO_FLOOR * global),
            None => f64::INFINITY,
        };
        reports.push(BlockError {
            name: store.name(id).to_string(),
            shape: store.get(id).shape().to_vec(),
            max_relative_error: err,
        });
    }
    Ok(reports)
}

fn central_differences(
    probe: &mut ParamStore,
    id: ParamId,
    step: f64,
    eval: &dyn Fn(&ParamStore) -> Option<f64>,
) -> Option<Vec<f64>> {
    let numel = probe.get(id).numel();
    let mut out = Vec::with_capacity(numel);
    for i in 0..numel {
        let orig = probe.get(id).data()[i];
        let mut at = |offset: f64| {
            probe.get_mut(id).data_mut()[i] = orig + offset;
            eval(probe)
        };
        let (p2, p1, m1, m2) = (at(2.0 * step), at(step), at(-step), at(-2.0 * step));
        probe.get_mut(id).data_mut()[i] = orig;
        // Five-point stencil, truncation error O(step⁴).
        out.push((-p2? + 8.0 * p1? - 8.0 * m1? + m2?) / (12.0 * step));
    }
    Some(out)
}

/// Error of one operation in [`operation_checks`].
#[derive(Clone, Debug)]
pub struct OpError {
    pub name: &'static str,
    pub max_relative_error: f64,
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Contracts `y` with fixed random weights so that every output coordinate
/// reaches the scalar (a plain sum would hide e.g. the softmax Jacobian).
fn project<'a>(t: &mut Tape<'a>, y: Var, weights: &Tensor) -> Result<Var> {
    let w = t.constant(weights.clone());
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Central-difference check of every tape operation with respect to each
/// differentiable input, on values drawn from U[−1, 1], at [`DEFAULT_STEP`].
pub fn operation_checks(seed: u64, fault: Option<Fault>) -> Vec<OpError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, x: Tensor, out_shape: &[usize], rng: &mut ChaCha8Rng, f: &dyn Fn(&mut Tape<'_>, Var) -> Result<Var>| {
        let w = uniform(out_shape, rng);
        let err = finite_diff_check_with(
            |t, x| {
                let y = f(t, x)?;
                project(t, y, &w)
            },
            &x,
            DEFAULT_STEP,
            fault,
        );
        out.push(OpError {
            name,
            max_relative_error: err,
        });
    };

    let (a, b) = (uniform(&[3, 4], &mut rng), uniform(&[4, 2], &mut rng));
    let bt = uniform(&[2, 4], &mut rng);
    {
        let b = b.clone();
        run("matmul.a", a.clone(), &[3, 2], &mut rng, &move |t, x| {
            let c = t.constant(b.clone());
            t.matmul(x, c)
        });
    }
    {
        let a2 = a.clone();
        run("matmul.b", b.clone(), &[3, 2], &mut rng, &move |t, x| {
            let c = t.constant(a2.clone());
            t.matmul(c, x)
        });
    }
    {
        let bt2 = bt.clone();
        run("matmul_t.a", a.clone(), &[3, 2], &mut rng, &move |t, x| {
            let c = t.constant(bt2.clone());
            t.matmul_t(x, c)
        });
    }
    {
        let a2 = a.clone();
        run("matmul_t.b", bt.clone(), &[3, 2], &mut rng, &move |t, x| {
            let c = t.constant(a2.clone());
            t.matmul_t(c, x)
        });
    }
    let bias = uniform(&[4], &mut rng);
    {
        let bias = bias.clone();
        run("add_bias.x", a.clone(), &[3, 4], &mut rng, &move |t, x| {
            let c = t.constant(bias.clone());
            t.add_bias(x, c)
        });
    }
    {
        let a2 = a.clone();
        run("add_bias.bias", bias.clone(), &[3, 4], &mut rng, &move |t, x| {
            let c = t.constant(a2.clone());
            t.add_bias(c, x)
        });
    }
    let other = uniform(&[3, 4], &mut rng);
    {
        let o = other.clone();
        run("add", a.clone(), &[3, 4], &mut rng, &move |t, x| {
            let c = t.constant(o.clone());
            t.add(x, c)
        });
    }
    {
        let o = other.clone();
        run("mul", a.clone(), &[3, 4], &mut rng, &move |t, x| {
            let c = t.constant(o.clone());
            t.mul(c, x)
        });
    }
    run("mul.shared", a.clone(), &[3, 4], &mut rng, &|t, x| t.mul(x, x));
    run("scale", a.clone(), &[3, 4], &mut rng, &|t, x| Ok(t.scale(x, -1.7)));
    run("relu", a.clone(), &[3, 4], &mut rng, &|t, x| Ok(t.relu(x)));
    run("gelu", a.clone(), &[3, 4], &mut rng, &|t, x| Ok(t.gelu(x)));
    run("sigmoid", a.clone(), &[3, 4], &mut rng, &|t, x| Ok(t.sigmoid(x)));
    run("softmax", a.clone(), &[3, 4], &mut rng, &|t, x| t.softmax(x));
    let (gamma, beta) = (uniform(&[4], &mut rng), uniform(&[4], &mut rng));
    {
        let (g, b) = (gamma.clone(), beta.clone());
        run("layernorm.x", a.clone(), &[3, 4], &mut rng, &move |t, x| {
            let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
            t.layernorm(x, g, b)
        });
    }
    {
        let (a2, b) = (a.clone(), beta.clone());
        run("layernorm.gamma", gamma.clone(), &[3, 4], &mut rng, &move |t, x| {
            let (c, b) = (t.constant(a2.clone()), t.constant(b.clone()));
            t.layernorm(c, x, b)
        });
    }
    {
        let (a2, g) = (a.clone(), gamma.clone());
        run("layernorm.beta", beta.clone(), &[3, 4], &mut rng, &move |t, x| {
            let (c, g) = (t.constant(a2.clone()), t.constant(g.clone()));
            t.layernorm(c, g, x)
        });
    }
    run("transpose", a.clone(), &[4, 3], &mut rng, &|t, x| t.transpose(x));
    run("reshape", a.clone(), &[2, 6], &mut rng, &|t, x| t.reshape(x, &[2, 6]));
    run("narrow", a.clone(), &[3, 2], &mut rng, &|t, x| t.narrow(x, 1, 1, 2));
    {
        let o = other.clone();
        run("concat", a.clone(), &[3, 8], &mut rng, &move |t, x| {
            let c = t.constant(o.clone());
            t.concat(&[c, x], 1)
        });
    }
    let image = uniform(&[2, 5, 5], &mut rng);
    let kernel = uniform(&[3, 2, 2, 2], &mut rng);
    let kbias = uniform(&[3], &mut rng);
    {
        let (k, kb) = (kernel.clone(), kbias.clone());
        run("conv2d.x", image.clone(), &[3, 2, 2], &mut rng, &move |t, x| {
            let (k, kb) = (t.constant(k.clone()), t.constant(kb.clone()));
            t.conv2d(x, k, Some(kb), 2)
        });
    }
    {
        let (im, kb) = (image.clone(), kbias.clone());
        run("conv2d.kernel", kernel.clone(), &[3, 4, 4], &mut rng, &move |t, x| {
            let (im, kb) = (t.constant(im.clone()), t.constant(kb.clone()));
            t.conv2d(im, x, Some(kb), 1)
        });
    }
    {
        let (im, k) = (image.clone(), kernel.clone());
        run("conv2d.bias", kbias.clone(), &[3, 2, 2], &mut rng, &move |t, x| {
            let (im, k) = (t.constant(im.clone()), t.constant(k.clone()));
            t.conv2d(im, k, Some(x), 2)
        });
    }
    run("sum", a.clone(), &[1], &mut rng, &|t, x| Ok(t.sum(x)));
    run("mean", a.clone(), &[1], &mut rng, &|t, x| Ok(t.mean(x)));
    let preds = uniform(&[5], &mut rng);
    let targets = uniform(&[5], &mut rng).into_data();
    let weights: Vec<f64> = uniform(&[5], &mut rng).data().iter().map(|v| v.abs() + 0.1).collect();
    run("weighted_l1", preds, &[1], &mut rng, &move |t, x| t.weighted_l1(x, &targets, &weights));
    out
}
