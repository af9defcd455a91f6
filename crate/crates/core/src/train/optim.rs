//! AdamW with decoupled weight decay and cosine annealing with warm restarts.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update at learning rate `lr`:
    /// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`. Parameters without a gradient are
    /// treated as having a zero gradient. Any non-finite gradient aborts the
    /// step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}, gradients {}",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of `{}` is {} at element {pos}",
                        store.name(id),
                        g.data()[pos]
                    )));
                }
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = grads.get(id).map(|g| g.data());
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let g = grad.map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

/// `lr = η_min + (η_max − η_min)·(1 + cos(π·T_cur/T_i))/2`; when `T_cur`
/// reaches `T_i` it resets to 0 and `T_i` is multiplied by `mult`.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineWarmRestarts {
    pub eta_max: f64,
    pub eta_min: f64,
    pub period: u64,
    pub t_cur: u64,
    pub mult: u64,
}

impl CosineWarmRestarts {
    pub fn new(eta_max: f64, eta_min: f64, first_period: u64, mult: u64) -> Result<Self> {
        if first_period == 0 || mult == 0 {
            return Err(Error::Config("restart period and multiplier must be positive".into()));
        }
        Ok(Self {
            eta_max,
            eta_min,
            period: first_period,
            t_cur: 0,
            mult,
        })
    }

    pub fn lr(&self) -> f64 {
        let phase = std::f64::consts::PI * self.t_cur as f64 / self.period as f64;
        self.eta_min + (self.eta_max - self.eta_min) * (1.0 + phase.cos()) / 2.0
    }

    /// Advances one iteration. Returns true when this tick was a restart.
    pub fn tick(&mut self) -> bool {
        self.t_cur += 1;
        if self.t_cur >= self.period {
            self.t_cur = 0;
            self.period *= self.mult;
            true
        } else {
            false
        }
    }
}
