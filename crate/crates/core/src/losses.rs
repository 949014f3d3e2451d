//! Generator objective: multi-resolution perceptual, low-resolution L1, Sobel edge
//! loss against the H&E input, adversarial, feature matching and DAB terms.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vstain_tensor::Tensor;

use crate::error::{Error, Result};
use crate::perceptual::{feature_distance, FeatureExtractor};
use crate::resample::{resize_tensor, Filter};
use crate::sobel::sobel_gradients;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub percept: f64,
    pub l1: f64,
    pub edge: f64,
    pub adv: f64,
    pub fm: f64,
    pub dab: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { percept: 1.0, l1: 1.0, edge: 0.5, adv: 1.0, fm: 10.0, dab: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// `(side, weight)` pairs of the perceptual term.
    pub percept_scales: Vec<(usize, f64)>,
    pub l1_size: usize,
    pub edge_scales: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            percept_scales: vec![(128, 1.0), (256, 0.5)],
            l1_size: 64,
            edge_scales: vec![512, 256],
        }
    }
}

impl LossConfig {
    pub fn validate(&self, resolution: usize) -> Result<()> {
        let w = &self.weights;
        if [w.percept, w.l1, w.edge, w.adv, w.fm, w.dab].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        let sides = self.percept_scales.iter().map(|p| p.0).chain([self.l1_size]).chain(self.edge_scales.iter().copied());
        for s in sides {
            if s == 0 || s > resolution {
                return Err(Error::Config(format!("loss side {s} outside 1..={resolution}")));
            }
        }
        if self.percept_scales.iter().any(|p| !(p.1 >= 0.0)) {
            return Err(Error::Config("perceptual scale weights must be >= 0".into()));
        }
        Ok(())
    }
}

fn resized(x: &Tensor, side: usize, filter: Filter) -> Tensor {
    resize_tensor(x, side, side, filter)
}

/// `Σ_s w_s · d(gen↓s, target↓s)` with bilinear downsampling; the target is constant.
pub fn perceptual_loss(gen: &Tensor, target: &Tensor, extractor: &dyn FeatureExtractor, scales: &[(usize, f64)]) -> Tensor {
    let target = target.detach();
    scales
        .iter()
        .map(|&(s, w)| feature_distance(extractor, &resized(gen, s, Filter::Bilinear), &resized(&target, s, Filter::Bilinear)).scale(w))
        .reduce(|a, b| a.add(&b))
        .unwrap_or_else(|| Tensor::scalar(0.0))
}

/// Mean absolute difference after area-downsampling both images to `side × side`.
pub fn l1_at(gen: &Tensor, target: &Tensor, side: usize) -> Tensor {
    resized(gen, side, Filter::Area).sub(&resized(&target.detach(), side, Filter::Area)).abs().mean_all()
}

/// Full-resolution mean absolute difference.
pub fn l1_full(gen: &Tensor, target: &Tensor) -> Tensor {
    gen.sub(&target.detach()).abs().mean_all()
}

/// `Σ_s mean|∇(gen↓s) − ∇(hne↓s)|`; the reference is the H&E input, never the IHC target.
pub fn edge_loss(gen: &Tensor, hne: &Tensor, scales: &[usize]) -> Tensor {
    let hne = hne.detach();
    scales
        .iter()
        .map(|&s| {
            let g = sobel_gradients(&resized(gen, s, Filter::Area));
            let h = sobel_gradients(&resized(&hne, s, Filter::Area));
            g.sub(&h).abs().mean_all()
        })
        .reduce(|a, b| a.add(&b))
        .unwrap_or_else(|| Tensor::scalar(0.0))
}

/// Unweighted loss components of one generator step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub percept: f64,
    pub l1: f64,
    pub edge: f64,
    pub adv: f64,
    pub fm: f64,
    pub dab: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("percept", self.percept),
            ("l1", self.l1),
            ("edge", self.edge),
            ("adv", self.adv),
            ("fm", self.fm),
            ("dab", self.dab),
        ]
    }
}

/// Effective coefficients at `step`: adversarial and feature-matching terms are
/// zero before `adv_start`.
pub fn coefficients(w: &LossWeights, step: u64, adv_start: u64) -> LossComponents {
    let on = step >= adv_start;
    LossComponents {
        percept: w.percept,
        l1: w.l1,
        edge: w.edge,
        adv: if on { w.adv } else { 0.0 },
        fm: if on { w.fm } else { 0.0 },
        dab: w.dab,
    }
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub step: u64,
    pub components: LossComponents,
    pub total: f64,
}

pub fn total_generator_loss(c: &LossComponents, w: &LossWeights, step: u64, adv_start: u64) -> Result<LossBundle> {
    for (name, v) in c.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name.into() });
        }
    }
    let k = coefficients(w, step, adv_start);
    let total = k.named().iter().zip(c.named()).filter(|(kk, _)| kk.1 != 0.0).map(|(kk, cc)| kk.1 * cc.1).sum();
    Ok(LossBundle { step, components: *c, total })
}

/// Appends one JSON object per line.
pub fn append_log(path: &Path, records: &[impl Serialize]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LossBundle>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}
