#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vstain::backbone::ToyBackboneConfig;
use vstain::config::RunConfig;
use vstain::image::{RgbImage, ValueRange};
use vstain::processor::ProcessorConfig;
use vstain::training::data::SyntheticConfig;
use vstain_tensor::Tensor;

/// 16-px generator with 4-px tokens: fast enough for per-test training steps.
pub fn micro() -> RunConfig {
    let mut c = RunConfig::desk();
    c.backbone.toy = ToyBackboneConfig { token_dim: 8, native_side: 8, patch: 4 };
    c.processor = ProcessorConfig { token_dim: 8, grid_side: 4, channels: 8, num_scales: 2, res_blocks: 1, groups: 2 };
    c.generator.resolution = 16;
    c.generator.encoder_channels = vec![3, 8, 8, 8];
    c.generator.bottleneck_blocks = 2;
    c.generator.head_channels = 8;
    c.generator.edge_channels = 4;
    c.generator.spade_hidden = 8;
    c.generator.embedding_dim = 8;
    c.disc.channels = vec![8, 8];
    c.loss.percept_scales = vec![(4, 1.0), (8, 0.5)];
    c.loss.l1_size = 4;
    c.loss.edge_scales = vec![16, 8];
    c.perceptual.random.channels = vec![4, 8];
    c.train.crop = 16;
    c.train.batch_size = 2;
    c.train.warmup = 0;
    c.eval.crop = 16;
    c.eval.source_side = 32;
    c.validate().expect("micro config is valid");
    c
}

pub fn micro_synthetic() -> SyntheticConfig {
    SyntheticConfig { side: 32, cells: 8, radius: [1.5, 3.5], ..SyntheticConfig::default() }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[lo, hi)` shaped `shape`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| r.random_range(lo..hi)).collect(), shape)
}

pub fn random_image(side: usize, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    RgbImage::new(side, side, (0..side * side * 3).map(|_| r.random_range(0.0..1.0)).collect(), ValueRange::Unit).unwrap()
}

/// Smooth sinusoidal texture sampled at integer offsets, so shifted copies are exact.
pub fn texture(side: usize, dy: usize, dx: usize, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    let waves: Vec<[f64; 4]> = (0..6)
        .map(|_| [r.random_range(0.05..0.6), r.random_range(0.05..0.6), r.random_range(0.0..6.3), r.random_range(0.1..0.3)])
        .collect();
    RgbImage::from_fn(side, side, ValueRange::Unit, |y, x| {
        let (yy, xx) = ((y + dy) as f64, (x + dx) as f64);
        std::array::from_fn(|c| {
            let v: f64 = waves.iter().enumerate().map(|(k, w)| w[3] * (w[0] * yy + w[1] * xx + w[2] + (c * k) as f64).sin()).sum();
            (0.5 + 0.5 * v.tanh()).clamp(0.0, 1.0)
        })
    })
    .unwrap()
}

/// Central-difference check of `f` at `x` over `coords`; returns the relative
/// error `‖a − n‖ / max(‖a‖, ‖n‖)` of the sampled gradient vectors.
pub fn gradcheck(f: impl Fn(&Tensor) -> Tensor, x: &[f64], shape: &[usize], coords: &[usize], h: f64) -> f64 {
    let xv = Tensor::var(x.to_vec(), shape);
    let grads = f(&xv).backward();
    let analytic = grads.get(&xv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |i: usize, d: f64| {
        let mut v = x.to_vec();
        v[i] += d;
        f(&Tensor::from_vec(v, shape)).item()
    };
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for &i in coords {
        let num = (eval(i, h) - eval(i, -h)) / (2.0 * h);
        diff += (analytic[i] - num).powi(2);
        na += analytic[i].powi(2);
        nn += num * num;
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Texture with a `1/f` amplitude spectrum over periods of 6 to 256 px, sampled at
/// integer offsets so shifted copies are exact.
pub fn pink_texture(side: usize, dy: usize, dx: usize, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    let waves: Vec<[f64; 5]> = (0..48)
        .map(|_| {
            let f = (r.random_range((1.0f64 / 256.0).ln()..(1.0f64 / 6.0).ln())).exp();
            let th = r.random_range(0.0..std::f64::consts::PI);
            let k = 2.0 * std::f64::consts::PI * f;
            [k * th.cos(), k * th.sin(), r.random_range(0.0..6.3), 0.004 / f, r.random_range(0.0..6.3)]
        })
        .collect();
    let norm = waves.iter().map(|w| w[3] * w[3]).sum::<f64>().sqrt();
    RgbImage::from_fn(side, side, ValueRange::Unit, |y, x| {
        let (yy, xx) = ((y + dy) as f64, (x + dx) as f64);
        std::array::from_fn(|c| {
            let v: f64 = waves.iter().map(|w| w[3] * (w[0] * yy + w[1] * xx + w[2] + c as f64 * w[4] * 0.3).sin()).sum();
            (0.5 + 0.5 * (1.5 * v / norm).tanh()).clamp(0.0, 1.0)
        })
    })
    .unwrap()
}
