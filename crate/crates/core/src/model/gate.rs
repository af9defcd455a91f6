//! Cross-attention gate between regions.
//!
//! For region `i` with features `Z_i` and gating signal `G_i` (the channel
//! concatenation of every other region's features):
//!
//! ```text
//! α   = ψ(conv_out(ReLU(conv_g(G_i) + conv_z(Z_i))))    // 1×h×w
//! Z^a = α ⊙ Z_i                                         // broadcast over channels
//! ```
//!
//! All three convolutions are 1×1.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::nn::{Conv2d, Module};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CrossAttentionGate {
    pub conv_z: Conv2d,
    pub conv_g: Conv2d,
    pub conv_out: Conv2d,
    pub others: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    /// `α ⊙ Z_i`, same shape as `Z_i`.
    pub gated: Var,
    /// Coefficient map `α`, shape `1×h×w`, strictly inside (0, 1).
    pub coefficients: Var,
}

impl CrossAttentionGate {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        others: usize,
        intermediate: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv_z: Conv2d::new(store, &format!("{name}.conv_z"), channels, intermediate, 1, 1, rng),
            conv_g: Conv2d::new(store, &format!("{name}.conv_g"), channels * others, intermediate, 1, 1, rng),
            conv_out: Conv2d::new(store, &format!("{name}.conv_out"), intermediate, 1, 1, 1, rng),
            others,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, z: Var, others: &[Var]) -> Result<GateOutput> {
        if others.len() != self.others {
            return Err(dim_err!(
                "gate expects {} gating maps, got {}",
                self.others,
                others.len()
            ));
        }
        let (c, h, w) = match *tape.shape(z) {
            [c, h, w] => (c, h, w),
            ref s => return Err(dim_err!("gate input must be C×h×w, got {s:?}")),
        };
        for &o in others {
            let s = tape.shape(o);
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(dim_err!("gating map {s:?} does not match input {:?}", tape.shape(z)));
            }
        }
        let g = tape.concat(others, 0)?;
        let gz = self.conv_z.forward(tape, store, z)?;
        let gg = self.conv_g.forward(tape, store, g)?;
        let sum = tape.add(gg, gz)?;
        let act = tape.relu(sum);
        let logits = self.conv_out.forward(tape, store, act)?;
        let alpha = tape.sigmoid(logits);

        // Broadcast α over channels as ones[C×1] · α[1×hw].
        let ones = tape.constant(Tensor::ones(&[c, 1]));
        let flat = tape.reshape(alpha, &[1, h * w])?;
        let spread = tape.matmul(ones, flat)?;
        let spread = tape.reshape(spread, &[c, h, w])?;
        let gated = tape.mul(spread, z)?;
        Ok(GateOutput {
            gated,
            coefficients: alpha,
        })
    }
}

impl Module for CrossAttentionGate {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.conv_z.collect_params(out);
        self.conv_g.collect_params(out);
        self.conv_out.collect_params(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn gate(seed: u64) -> (ParamStore, CrossAttentionGate) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = CrossAttentionGate::new(&mut store, "gate", 3, 3, 5, &mut rng);
        // Widen the weights so the gate is far from its α≈0.5 starting point.
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, random(&shape, seed + id.index() as u64)).unwrap();
        }
        (store, g)
    }

    #[test]
    fn zeroed_output_conv_halves_signal() {
        let (mut store, g) = gate(1);
        for id in [g.conv_out.kernel, g.conv_out.bias] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let z = random(&[3, 2, 2], 10);
        let mut tape = Tape::inference();
        let zv = tape.constant(z.clone());
        let others: Vec<Var> = (0..3).map(|i| tape.constant(random(&[3, 2, 2], 20 + i))).collect();
        let out = g.forward(&mut tape, &store, zv, &others).unwrap();
        let expected = z.map(|v| 0.5 * v);
        assert_eq!(tape.value(out.gated), &expected);
    }

    #[test]
    fn coefficients_in_open_unit_interval() {
        let (store, g) = gate(2);
        let z = random(&[3, 4, 4], 11);
        let mut tape = Tape::inference();
        let zv = tape.constant(z.clone());
        let others: Vec<Var> = (0..3).map(|i| tape.constant(random(&[3, 4, 4], 30 + i))).collect();
        let out = g.forward(&mut tape, &store, zv, &others).unwrap();
        assert_eq!(tape.shape(out.coefficients), &[1, 4, 4]);
        assert!(tape.value(out.coefficients).data().iter().all(|&a| a > 0.0 && a < 1.0));
        for (gz, zz) in tape.value(out.gated).data().iter().zip(z.data()) {
            assert!(gz.abs() <= zz.abs());
        }
    }

    #[test]
    fn spatial_mismatch_rejected() {
        let (store, g) = gate(3);
        let mut tape = Tape::inference();
        let z = tape.constant(random(&[3, 2, 2], 1));
        let mut others: Vec<Var> = (0..2).map(|i| tape.constant(random(&[3, 2, 2], 2 + i))).collect();
        others.push(tape.constant(random(&[3, 2, 3], 9)));
        assert!(g.forward(&mut tape, &store, z, &others).is_err());
        assert!(g.forward(&mut tape, &store, z, &others[..2]).is_err());
    }

    #[test]
    fn gradients_reach_input_and_every_gating_map() {
        let (store, g) = gate(4);
        let maps: Vec<Tensor> = (0..4).map(|i| random(&[3, 2, 2], 40 + i)).collect();
        // Differentiate w.r.t. each map in turn; every one must have a nonzero,
        // finite-difference-confirmed gradient.
        fn build<'s>(
            tape: &mut Tape<'s>,
            store: &'s ParamStore,
            g: &CrossAttentionGate,
            maps: &[Tensor],
            target: usize,
            x: Var,
        ) -> Result<Var> {
            let vars: Vec<Var> = (0..maps.len())
                .map(|i| if i == target { x } else { tape.constant(maps[i].clone()) })
                .collect();
            let out = g.forward(tape, store, vars[0], &vars[1..])?;
            let sq = tape.mul(out.gated, out.gated)?;
            Ok(tape.sum(sq))
        }
        for target in 0..4 {
            let err = finite_diff_check(|t, x| build(t, &store, &g, &maps, target, x), &maps[target], 1e-5);
            assert!(err < 1e-6, "map {target}: {err}");

            let mut tape = Tape::new();
            let x = tape.leaf(maps[target].clone(), true);
            let loss = build(&mut tape, &store, &g, &maps, target, x).unwrap();
            tape.backward(loss).unwrap();
            let grad = tape.grad(x).unwrap();
            assert!(grad.data().iter().any(|v| v.abs() > 1e-6), "map {target} has no gradient");
        }
    }
}
