//! Adapts a backbone token grid into one conditioning map per SPADE stage.

use serde::{Deserialize, Serialize};
use vstain_tensor::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, GroupNorm, VarBuilder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcessorConfig {
    pub token_dim: usize,
    pub grid_side: usize,
    pub channels: usize,
    /// Number of output maps; map `i` has side `grid_side · 2^i`.
    pub num_scales: usize,
    pub res_blocks: usize,
    pub groups: usize,
}

impl Default for ProcessorConfig {
    fn default() -> Self {
        ProcessorConfig { token_dim: 1024, grid_side: 32, channels: 512, num_scales: 4, res_blocks: 2, groups: 32 }
    }
}

impl ProcessorConfig {
    pub fn scales(&self) -> Vec<usize> {
        (0..self.num_scales).map(|i| self.grid_side << i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.grid_side == 0 || self.channels == 0 || self.num_scales == 0 {
            return Err(Error::Config("processor dimensions must be positive".into()));
        }
        if self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "processor.channels {} not divisible by processor.groups {}",
                self.channels, self.groups
            )));
        }
        Ok(())
    }
}

/// Conditioning maps ordered from the coarsest scale up, each `[n, c, s, s]`.
#[derive(Clone, Debug)]
pub struct MultiScaleConditioning {
    pub maps: Vec<Tensor>,
}

impl MultiScaleConditioning {
    pub fn scales(&self) -> Vec<usize> {
        self.maps.iter().map(|m| m.dims4().2).collect()
    }

    pub fn map_at(&self, side: usize) -> Option<&Tensor> {
        self.maps.iter().find(|m| m.dims4().2 == side)
    }

    /// Zeroes the maps of the samples flagged in `drop`.
    pub fn drop_samples(&self, drop: &[bool]) -> MultiScaleConditioning {
        if !drop.iter().any(|&d| d) {
            return self.clone();
        }
        let mask: Vec<f64> = drop.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
        let mask = Tensor::from_vec(mask, &[drop.len(), 1, 1, 1]);
        MultiScaleConditioning { maps: self.maps.iter().map(|m| m.mul(&mask)).collect() }
    }

    pub fn zeros_like(&self) -> MultiScaleConditioning {
        MultiScaleConditioning { maps: self.maps.iter().map(|m| m.zeros_like()).collect() }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    n2: GroupNorm,
    c2: Conv2d,
}

impl ResBlock {
    fn new(vb: &VarBuilder, c: usize, groups: usize) -> Self {
        ResBlock {
            n1: GroupNorm::new(&vb.pp("norm1"), groups, c),
            c1: Conv2d::new(&vb.pp("conv1"), c, c, 3, 1, 1, true),
            n2: GroupNorm::new(&vb.pp("norm2"), groups, c),
            c2: Conv2d::new(&vb.pp("conv2"), c, c, 3, 1, 1, true),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.c1.forward(&self.n1.forward(x).leaky_relu(0.2));
        let h = self.c2.forward(&self.n2.forward(&h).leaky_relu(0.2));
        x.add(&h)
    }
}

/// 1×1 projection, residual refinement at the token-grid side, then a chain of
/// stride-2 transposed convolutions for the finer scales.
#[derive(Clone, Debug)]
pub struct FeatureProcessor {
    cfg: ProcessorConfig,
    proj: Conv2d,
    blocks: Vec<ResBlock>,
    ups: Vec<ConvTranspose2d>,
}

impl FeatureProcessor {
    pub fn new(vb: &VarBuilder, cfg: &ProcessorConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(FeatureProcessor {
            proj: Conv2d::new(&vb.pp("proj"), cfg.token_dim, c, 1, 1, 0, true),
            blocks: (0..cfg.res_blocks).map(|i| ResBlock::new(&vb.pp(format!("res{i}")), c, cfg.groups)).collect(),
            ups: (1..cfg.num_scales).map(|i| ConvTranspose2d::new(&vb.pp(format!("up{i}")), c, c, 4, 2, 1)).collect(),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ProcessorConfig {
        &self.cfg
    }

    /// `tokens: [n, d, G, G]`.
    pub fn forward(&self, tokens: &Tensor) -> Result<MultiScaleConditioning> {
        let (_, d, g, g2) = tokens.dims4();
        if d != self.cfg.token_dim || g != self.cfg.grid_side || g2 != g {
            return Err(Error::Shape(format!(
                "processor expects [n, {}, {2}, {2}] tokens, got {:?}",
                self.cfg.token_dim,
                tokens.shape(),
                self.cfg.grid_side
            )));
        }
        let mut h = self.proj.forward(tokens);
        for b in &self.blocks {
            h = b.forward(&h);
        }
        let mut maps = vec![h];
        for up in &self.ups {
            let next = up.forward(&maps.last().expect("non-empty").leaky_relu(0.2));
            maps.push(next);
        }
        Ok(MultiScaleConditioning { maps })
    }
}
