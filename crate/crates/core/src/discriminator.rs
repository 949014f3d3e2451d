//! Unconditional multi-scale PatchGAN with hinge loss, R1 and feature matching.

use serde::{Deserialize, Serialize};
use vstain_tensor::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, VarMap};

const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub scales: usize,
    /// Widths of the stride-2 convolutions.
    pub channels: Vec<usize>,
    pub r1_gamma: f64,
    /// Feature layers used by feature matching; empty selects all.
    pub fm_layers: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { scales: 2, channels: vec![64, 128, 256, 512], r1_gamma: 1.0, fm_layers: Vec::new() }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("disc.scales and disc.channels must be positive".into()));
        }
        if !(self.r1_gamma >= 0.0) {
            return Err(Error::Config("disc.r1_gamma must be >= 0".into()));
        }
        if let Some(&l) = self.fm_layers.iter().find(|&&l| l >= self.channels.len()) {
            return Err(Error::Config(format!("disc.fm_layers entry {l} exceeds {} layers", self.channels.len())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    /// One patch-logit map `[n, 1, h, w]` per scale, full resolution first.
    pub logits: Vec<Tensor>,
    /// Post-activation feature maps per scale.
    pub features: Vec<Vec<Tensor>>,
}

#[derive(Clone, Debug)]
struct ScaleNet {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    nets: Vec<ScaleNet>,
}

impl Discriminator {
    pub fn new(vm: &VarMap, cfg: &DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let vb = vm.builder().pp("disc");
        let nets = (0..cfg.scales)
            .map(|s| {
                let v = vb.pp(format!("scale{s}"));
                let mut cin = 3;
                let convs = cfg
                    .channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let conv = Conv2d::new(&v.pp(format!("conv{i}")), cin, c, 4, 2, 1, true);
                        cin = c;
                        conv
                    })
                    .collect();
                ScaleNet { convs, head: Conv2d::new(&v.pp("head"), cin, 1, 3, 1, 1, true) }
            })
            .collect();
        Ok(Discriminator { cfg: cfg.clone(), nets })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// Judges one signed-range image batch `[n, 3, h, w]`; there is no input for the
    /// paired H&E image.
    pub fn discriminate(&self, img: &Tensor) -> DiscriminatorOutput {
        let mut logits = Vec::with_capacity(self.nets.len());
        let mut features = Vec::with_capacity(self.nets.len());
        let mut x = img.clone();
        for (s, net) in self.nets.iter().enumerate() {
            if s > 0 {
                x = x.avg_pool2d(2);
            }
            let mut h = x.clone();
            let mut feats = Vec::with_capacity(net.convs.len());
            for conv in &net.convs {
                h = conv.forward(&h).leaky_relu(SLOPE);
                feats.push(h.clone());
            }
            logits.push(net.head.forward(&h));
            features.push(feats);
        }
        DiscriminatorOutput { logits, features }
    }

    /// Features restricted to the configured matching layers.
    pub fn fm_features(&self, out: &DiscriminatorOutput) -> Vec<Vec<Tensor>> {
        if self.cfg.fm_layers.is_empty() {
            return out.features.clone();
        }
        out.features.iter().map(|f| self.cfg.fm_layers.iter().map(|&l| f[l].clone()).collect()).collect()
    }
}

fn mean_over(parts: Vec<Tensor>) -> Tensor {
    let n = parts.len() as f64;
    parts.into_iter().reduce(|a, b| a.add(&b)).expect("at least one scale").scale(1.0 / n)
}

/// `mean(relu(1 - real)) + mean(relu(1 + fake))`, averaged over scales.
pub fn hinge_d_loss(real: &[Tensor], fake: &[Tensor]) -> Tensor {
    assert_eq!(real.len(), fake.len(), "scale count mismatch");
    mean_over(
        real.iter()
            .zip(fake)
            .map(|(r, f)| r.neg().add_scalar(1.0).relu().mean_all().add(&f.add_scalar(1.0).relu().mean_all()))
            .collect(),
    )
}

/// `-mean(fake)`, averaged over scales.
pub fn hinge_g_loss(fake: &[Tensor]) -> Tensor {
    mean_over(fake.iter().map(|f| f.mean_all().neg()).collect())
}

/// `(γ/2) · mean_n ‖∇_x Σ logits(x)‖²` on real images. The result stays
/// differentiable with respect to whatever `critic` depends on.
pub fn r1_penalty(real: &Tensor, gamma: f64, critic: impl Fn(&Tensor) -> Vec<Tensor>) -> Tensor {
    let x = real.detach_var();
    let total = critic(&x).iter().map(|l| l.sum_all()).reduce(|a, b| a.add(&b)).expect("critic emits logits");
    let grads = total.backward_with_graph();
    let n = real.dim(0) as f64;
    match grads.get(&x) {
        Some(g) => g.sqr().sum_all().scale(gamma * 0.5 / n),
        None => Tensor::scalar(0.0),
    }
}

/// Per scale, the sum over layers of the mean absolute difference; averaged over scales.
pub fn feature_matching_loss(fake: &[Vec<Tensor>], real: &[Vec<Tensor>]) -> Result<Tensor> {
    if fake.len() != real.len() || fake.is_empty() {
        return Err(Error::Shape(format!("feature scales differ: {} vs {}", fake.len(), real.len())));
    }
    let mut per_scale = Vec::with_capacity(fake.len());
    for (f, r) in fake.iter().zip(real) {
        if f.len() != r.len() || f.is_empty() {
            return Err(Error::Shape(format!("feature layers differ: {} vs {}", f.len(), r.len())));
        }
        let s = f.iter().zip(r).map(|(a, b)| a.sub(b).abs().mean_all()).reduce(|a, b| a.add(&b)).expect("non-empty");
        per_scale.push(s);
    }
    Ok(mean_over(per_scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DiscriminatorConfig {
        DiscriminatorConfig { scales: 2, channels: vec![4, 8, 8, 8], r1_gamma: 1.0, fm_layers: vec![] }
    }

    #[test]
    fn logit_maps_follow_stride_arithmetic() {
        let vm = VarMap::new(0);
        let d = Discriminator::new(&vm, &tiny()).unwrap();
        let out = d.discriminate(&Tensor::full(&[2, 3, 32, 32], 0.1));
        assert_eq!(out.logits[0].shape(), &[2, 1, 2, 2]);
        assert_eq!(out.logits[1].shape(), &[2, 1, 1, 1]);
        assert_eq!(out.features[0].len(), 4);
    }

    #[test]
    fn hinge_examples() {
        let z = [Tensor::zeros(&[1, 1, 2, 2])];
        assert_eq!(hinge_d_loss(&z, &z).item(), 2.0);
        assert_eq!(hinge_g_loss(&z).item(), 0.0);
        let hi = [Tensor::full(&[1, 1, 2, 2], 5.0)];
        let lo = [Tensor::full(&[1, 1, 2, 2], -5.0)];
        assert_eq!(hinge_d_loss(&hi, &lo).item(), 0.0);
        assert!(hinge_g_loss(&hi).item() < hinge_g_loss(&lo).item());
    }

    #[test]
    fn r1_of_linear_critic() {
        let w = 0.7;
        let x = Tensor::full(&[1, 3, 2, 2], 0.2);
        // single-pixel linear critic: logit = w · x[0, 0, 0, 0]
        let p = r1_penalty(&x, 1.0, |x| vec![x.narrow(1, 0, 1).narrow(2, 0, 1).narrow(3, 0, 1).scale(w)]);
        assert!((p.item() - 0.5 * w * w).abs() < 1e-15);
        let p = r1_penalty(&x, 1.0, |x| vec![x.scale(0.0).sum_all().reshape(&[1, 1, 1, 1])]);
        assert_eq!(p.item(), 0.0);
    }

    #[test]
    fn feature_matching_examples() {
        let a = vec![vec![Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2])]];
        let b = vec![vec![Tensor::from_vec(vec![0.0, 2.5, 3.0, 6.0], &[1, 1, 2, 2])]];
        let l = feature_matching_loss(&a, &b).unwrap().item();
        assert!((l - (1.0 + 0.5 + 0.0 + 2.0) / 4.0).abs() < 1e-15);
        assert_eq!(l, feature_matching_loss(&b, &a).unwrap().item());
        assert_eq!(feature_matching_loss(&a, &a).unwrap().item(), 0.0);
        assert!(feature_matching_loss(&a, &[vec![]]).is_err());
    }
}
