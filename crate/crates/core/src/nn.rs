//! Named parameters and the small set of layers the models are built from.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vstain_tensor::Tensor;

use crate::error::{Error, Result};

thread_local! {
    static FROZEN: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with every [`Param::get`] returning a detached copy, so the parameters
/// act as constants while gradients still reach the inputs.
pub fn frozen<T>(f: impl FnOnce() -> T) -> T {
    let prev = FROZEN.with(|c| c.replace(true));
    let out = f();
    FROZEN.with(|c| c.set(prev));
    out
}

/// A trainable array shared between a module and its [`VarMap`].
#[derive(Clone, Debug)]
pub struct Param {
    name: Arc<str>,
    value: Arc<RwLock<Tensor>>,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn get(&self) -> Tensor {
        let t = self.value.read().expect("param lock").clone();
        if FROZEN.with(|c| c.get()) {
            t.detach()
        } else {
            t
        }
    }

    /// Replaces the value with a fresh leaf holding `data`.
    pub fn set_data(&self, data: Vec<f64>) {
        let mut guard = self.value.write().expect("param lock");
        assert_eq!(data.len(), guard.numel(), "param {} size changed", self.name);
        let shape = guard.shape().to_vec();
        *guard = Tensor::var(data, &shape);
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.read().expect("param lock").shape().to_vec()
    }
}

#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    Normal(f64),
    Values(Vec<f64>),
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Ordered collection of named parameters. Initial values depend only on the seed
/// and the parameter name, never on construction order.
#[derive(Clone, Debug, Default)]
pub struct VarMap {
    seed: u64,
    vars: Arc<RwLock<BTreeMap<String, Param>>>,
}

impl VarMap {
    pub fn new(seed: u64) -> Self {
        VarMap { seed, vars: Default::default() }
    }

    pub fn builder(&self) -> VarBuilder {
        VarBuilder { map: self.clone(), prefix: String::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn get_or_init(&self, name: String, shape: &[usize], init: Init) -> Param {
        let mut vars = self.vars.write().expect("varmap lock");
        if let Some(p) = vars.get(&name) {
            assert_eq!(p.shape(), shape, "parameter {name} exists with another shape");
            return p.clone();
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect(),
            Init::Values(v) => {
                assert_eq!(v.len(), n, "init values for {name}");
                v
            }
        };
        let p = Param { name: name.clone().into(), value: Arc::new(RwLock::new(Tensor::var(data, shape))) };
        vars.insert(name, p.clone());
        p
    }

    /// Parameters in name order.
    pub fn params(&self) -> Vec<Param> {
        self.vars.read().expect("varmap lock").values().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        self.vars.read().expect("varmap lock").get(name).cloned()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.shape().iter().product::<usize>()).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.params()
            .iter()
            .filter(|p| p.name().starts_with(prefix))
            .map(|p| p.shape().iter().product::<usize>())
            .sum()
    }

    /// `(name, shape, values)` snapshot in name order.
    pub fn snapshot(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.params().iter().map(|p| (p.name().to_string(), p.shape(), p.get().to_vec())).collect()
    }

    /// Inserts or overwrites values; shapes must agree with existing entries.
    pub fn load(&self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let mut vars = self.vars.write().expect("varmap lock");
        for (name, shape, data) in entries {
            if data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("parameter {name}: data length does not match shape")));
            }
            match vars.get(name) {
                Some(p) if p.shape() != *shape => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: shape {shape:?} differs from model {:?}",
                        p.shape()
                    )))
                }
                Some(p) => p.set_data(data.clone()),
                None => {
                    let p = Param {
                        name: name.as_str().into(),
                        value: Arc::new(RwLock::new(Tensor::var(data.clone(), shape))),
                    };
                    vars.insert(name.clone(), p);
                }
            }
        }
        Ok(())
    }

    /// Independent copy with the same names and values.
    pub fn deep_clone(&self) -> VarMap {
        let out = VarMap::new(self.seed);
        out.load(&self.snapshot()).expect("fresh map accepts any snapshot");
        out
    }
}

#[derive(Clone, Debug)]
pub struct VarBuilder {
    map: VarMap,
    prefix: String,
}

impl VarBuilder {
    pub fn pp(&self, name: impl std::fmt::Display) -> VarBuilder {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        VarBuilder { map: self.map.clone(), prefix }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Param {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.map.get_or_init(full, shape, init)
    }

    pub fn map(&self) -> &VarMap {
        &self.map
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: Param,
    b: Option<Param>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(vb: &VarBuilder, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Conv2d {
            w: vb.get("weight", &[cout, cin, k, k], Init::Uniform(bound)),
            b: bias.then(|| vb.get("bias", &[cout], Init::Uniform(bound))),
            stride,
            pad,
        }
    }

    /// All-zero weights and (if present) biases.
    pub fn zeros(vb: &VarBuilder, cin: usize, cout: usize, k: usize, pad: usize, bias: bool) -> Self {
        Conv2d {
            w: vb.get("weight", &[cout, cin, k, k], Init::Zeros),
            b: bias.then(|| vb.get("bias", &[cout], Init::Zeros)),
            stride: 1,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = x.conv2d(&self.w.get(), self.stride, self.pad);
        match &self.b {
            Some(b) => {
                let b = b.get();
                y.add(&b.reshape(&[1, b.numel(), 1, 1]))
            }
            None => y,
        }
    }
}

/// Transposed convolution, weight `[cin, cout, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    w: Param,
    b: Param,
    stride: usize,
    pad: usize,
}

impl ConvTranspose2d {
    pub fn new(vb: &VarBuilder, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64 / (stride * stride) as f64).sqrt();
        ConvTranspose2d {
            w: vb.get("weight", &[cin, cout, k, k], Init::Uniform(bound)),
            b: vb.get("bias", &[cout], Init::Uniform(bound)),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let b = self.b.get();
        x.conv_transpose2d(&self.w.get(), self.stride, self.pad, 0).add(&b.reshape(&[1, b.numel(), 1, 1]))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: Param,
    b: Param,
}

impl Linear {
    pub fn new(vb: &VarBuilder, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Linear { w: vb.get("weight", &[din, dout], Init::Uniform(bound)), b: vb.get("bias", &[dout], Init::Uniform(bound)) }
    }

    pub fn with_init(vb: &VarBuilder, din: usize, dout: usize, w: Init, b: Init) -> Self {
        Linear { w: vb.get("weight", &[din, dout], w), b: vb.get("bias", &[dout], b) }
    }

    /// `[n, din] -> [n, dout]`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w.get()).add(&self.b.get())
    }
}

/// Normalizes each `[h, w]` plane to zero mean and unit variance (no affine).
pub fn instance_norm(x: &Tensor, eps: f64) -> Tensor {
    let mean = x.mean_keepdim(&[2, 3]);
    let centred = x.sub(&mean);
    let var = centred.sqr().mean_keepdim(&[2, 3]);
    centred.div(&var.add_scalar(eps).sqrt())
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    groups: usize,
    gamma: Param,
    beta: Param,
    eps: f64,
}

impl GroupNorm {
    pub fn new(vb: &VarBuilder, groups: usize, channels: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "{channels} channels not divisible into {groups} groups");
        GroupNorm {
            groups,
            gamma: vb.get("weight", &[channels], Init::Const(1.0)),
            beta: vb.get("bias", &[channels], Init::Zeros),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let g = x.reshape(&[n, self.groups, c / self.groups * h * w]);
        let mean = g.mean_keepdim(&[2]);
        let centred = g.sub(&mean);
        let var = centred.sqr().mean_keepdim(&[2]);
        let y = centred.div(&var.add_scalar(self.eps).sqrt()).reshape(&[n, c, h, w]);
        y.mul(&self.gamma.get().reshape(&[1, c, 1, 1])).add(&self.beta.get().reshape(&[1, c, 1, 1]))
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: Param,
    rows: usize,
}

impl Embedding {
    pub fn new(vb: &VarBuilder, rows: usize, dim: usize) -> Self {
        Embedding { table: vb.get("weight", &[rows, dim], Init::Normal(1.0)), rows }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `[len(indices), dim]`.
    pub fn forward(&self, indices: &[usize]) -> Tensor {
        self.table.get().index_select0(indices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_not_order() {
        let a = VarMap::new(7);
        let pa = a.builder().pp("x").get("w", &[3], Init::Uniform(1.0));
        a.builder().get("other", &[2], Init::Uniform(1.0));
        let b = VarMap::new(7);
        b.builder().get("other2", &[5], Init::Uniform(1.0));
        let pb = b.builder().pp("x").get("w", &[3], Init::Uniform(1.0));
        assert!(pa.get().bitwise_eq(&pb.get()));
        assert_eq!(pa.name(), "x.w");
    }

    #[test]
    fn existing_entries_are_reused() {
        let m = VarMap::new(1);
        m.load(&[("l.weight".into(), vec![2, 1], vec![5.0, 6.0]), ("l.bias".into(), vec![1], vec![0.5])]).unwrap();
        let lin = Linear::new(&m.builder().pp("l"), 2, 1);
        let y = lin.forward(&Tensor::from_vec(vec![1.0, 1.0], &[1, 2]));
        assert_eq!(y.to_vec(), vec![11.5]);
        assert!(m.load(&[("l.bias".into(), vec![2], vec![0.0, 0.0])]).is_err());
    }

    #[test]
    fn frozen_params_are_constants() {
        let m = VarMap::new(3);
        let lin = Linear::new(&m.builder(), 2, 1);
        let x = Tensor::var(vec![1.0, 2.0], &[1, 2]);
        let g = frozen(|| lin.forward(&x).sum_all()).backward();
        assert_eq!(g.len(), 1);
        assert!(g.get(&x).is_some());
    }

    #[test]
    fn instance_norm_has_zero_mean_unit_variance() {
        let x = Tensor::from_vec((0..32).map(|v| (v as f64 * 0.7).sin() * 3.0 + 1.0).collect(), &[1, 2, 4, 4]);
        let y = instance_norm(&x, 0.0);
        for plane in y.data().chunks(16) {
            let m: f64 = plane.iter().sum::<f64>() / 16.0;
            let v: f64 = plane.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn group_norm_with_one_group_per_channel_matches_instance_norm() {
        let m = VarMap::new(0);
        let gn = GroupNorm::new(&m.builder(), 3, 3);
        let x = Tensor::from_vec((0..48).map(|v| (v as f64 * 1.3).cos()).collect(), &[1, 3, 4, 4]);
        assert!(gn.forward(&x).max_abs_diff(&instance_norm(&x, 1e-5)) < 1e-12);
    }
}
