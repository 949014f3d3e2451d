//! Frozen multi-layer feature extractors and the LPIPS-style distance built on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vstain_tensor::Tensor;

/// A frozen network mapping `[n, 3, h, w]` signed-range images to feature maps.
/// Outputs must be differentiable in the input and constant in the weights.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, x: &Tensor) -> Vec<Tensor>;

    /// Pooled global descriptor `[n, dim]` for distribution metrics.
    fn embed(&self, x: &Tensor) -> Tensor {
        let feats = self.features(x);
        let n = x.dim(0);
        let pooled: Vec<Tensor> = feats.iter().map(|f| f.mean_keepdim(&[2, 3]).reshape(&[n, f.dim(1)])).collect();
        Tensor::cat(&pooled, 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomConvConfig {
    pub channels: Vec<usize>,
}

impl Default for RandomConvConfig {
    fn default() -> Self {
        RandomConvConfig { channels: vec![16, 32, 32] }
    }
}

/// Seeded random 3×3 convolution stack. The first layer keeps full resolution,
/// the rest downsample by 2.
#[derive(Clone, Debug)]
pub struct RandomConvFeatures {
    weights: Vec<(Tensor, Tensor)>,
}

impl RandomConvFeatures {
    pub fn new(seed: u64, cfg: &RandomConvConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_fea7);
        let mut cin = 3;
        let weights = cfg
            .channels
            .iter()
            .map(|&c| {
                let b = (6.0 / (cin * 9) as f64).sqrt();
                let w: Vec<f64> = (0..c * cin * 9).map(|_| rng.random_range(-b..b)).collect();
                let bias: Vec<f64> = (0..c).map(|_| rng.random_range(-0.1..0.1)).collect();
                let out = (Tensor::from_vec(w, &[c, cin, 3, 3]), Tensor::from_vec(bias, &[1, c, 1, 1]));
                cin = c;
                out
            })
            .collect();
        RandomConvFeatures { weights }
    }
}

impl FeatureExtractor for RandomConvFeatures {
    fn features(&self, x: &Tensor) -> Vec<Tensor> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.weights.len());
        for (i, (w, b)) in self.weights.iter().enumerate() {
            let stride = if i == 0 || h.dim(2) < 4 { 1 } else { 2 };
            h = h.conv2d(w, stride, 1).add(b).leaky_relu(0.2);
            out.push(h.clone());
        }
        out
    }
}

/// Channel-unit-normalized squared feature difference, summed over channels,
/// averaged over batch and positions, summed over layers.
pub fn feature_distance(extractor: &dyn FeatureExtractor, a: &Tensor, b: &Tensor) -> Tensor {
    let fa = extractor.features(a);
    let fb = extractor.features(b);
    fa.iter()
        .zip(&fb)
        .map(|(x, y)| {
            let unit = |t: &Tensor| t.div(&t.sqr().sum_keepdim(&[1]).add_scalar(1e-10).sqrt());
            let d = unit(x).sub(&unit(y)).sqr().sum_keepdim(&[1]);
            d.mean_all()
        })
        .reduce(|p, q| p.add(&q))
        .unwrap_or_else(|| Tensor::scalar(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_is_zero_on_identical_inputs_and_positive_otherwise() {
        let e = RandomConvFeatures::new(1, &RandomConvConfig::default());
        let a = Tensor::from_vec((0..3 * 64).map(|v| (v as f64 * 0.31).sin()).collect(), &[1, 3, 8, 8]);
        let b = a.scale(-1.0);
        assert_eq!(feature_distance(&e, &a, &a).item(), 0.0);
        assert!(feature_distance(&e, &a, &b).item() > 0.0);
        assert_eq!(e.embed(&a).shape(), &[1, 80]);
    }
}
