use serde::{Deserialize, Serialize};
use vstain_tensor::Gradients;

use crate::error::{Error, Result};
use crate::nn::{Param, VarMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

/// Adam over every parameter of one [`VarMap`], in name order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    params: Vec<Param>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(vm: &VarMap, cfg: AdamConfig) -> Self {
        let params = vm.params();
        let m = params.iter().map(|p| vec![0.0; p.shape().iter().product()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.shape().iter().product()]).collect();
        Adam { cfg, params, m, v, t: 0 }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// One update at learning rate `lr`; parameters without a gradient count as zero
    /// gradient.
    pub fn step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let value = p.get();
            let g = grads.get(&value);
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite { component: format!("gradient of {}", p.name()) });
                }
            }
            let mut data = value.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
            p.set_data(data);
        }
        Ok(())
    }
}

/// Exponential moving average of a parameter map.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    pub shadow: VarMap,
}

impl Ema {
    pub fn new(source: &VarMap, decay: f64) -> Self {
        Ema { decay, shadow: source.deep_clone() }
    }

    /// `s ← decay·s + (1 − decay)·θ`.
    pub fn update(&self, source: &VarMap) {
        for p in source.params() {
            let s = self.shadow.get(p.name()).expect("shadow mirrors source");
            let theta = p.get();
            let data = s.get().data().iter().zip(theta.data()).map(|(a, b)| self.decay * a + (1.0 - self.decay) * b).collect();
            s.set_data(data);
        }
    }
}
