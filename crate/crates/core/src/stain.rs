//! Beer–Lambert colour deconvolution and DAB quantification.
//!
//! Transmitted intensity `I` relates to optical density by `OD = -log10(I)`. Stains
//! add linearly in OD space, so a pixel's OD row vector is `c · M` where `M` holds one
//! unit stain vector per row and `c` the stain concentrations. Deconvolution applies
//! the precomputed inverse of `M`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use vstain_tensor::Tensor;

use crate::error::{Error, Result};
use crate::image::{RgbImage, ValueRange};

/// Hematoxylin optical-density direction of the standard H-DAB basis.
pub const HEMATOXYLIN: [f64; 3] = [0.650, 0.704, 0.286];
/// DAB optical-density direction of the standard H-DAB basis.
pub const DAB: [f64; 3] = [0.269, 0.568, 0.872];

/// Index of the DAB row / concentration channel.
pub const DAB_INDEX: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct StainMatrix {
    rows: [[f64; 3]; 3],
    inverse: [[f64; 3]; 3],
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

impl StainMatrix {
    /// Rows are (hematoxylin, residual, DAB); each must have unit norm.
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if !r.iter().all(|v| v.is_finite()) || (norm(*r) - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("stain row {i} {r:?} is not a unit vector")));
            }
        }
        let m = nalgebra::Matrix3::from_fn(|i, j| rows[i][j]);
        let svd = m.svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smin <= 1e-12 || !(smax / smin).is_finite() {
            return Err(Error::Config("stain matrix is singular".into()));
        }
        let inv = m.try_inverse().ok_or_else(|| Error::Config("stain matrix is singular".into()))?;
        let inverse = std::array::from_fn(|i| std::array::from_fn(|j| inv[(i, j)]));
        Ok(StainMatrix { rows, inverse })
    }

    /// Builds (H, residual, DAB) from two stain directions; the residual row is
    /// their normalized cross product.
    pub fn from_stain_vectors(hematoxylin: [f64; 3], dab: [f64; 3]) -> Result<Self> {
        let h = normalized(hematoxylin);
        let d = normalized(dab);
        let residual = cross(h, d);
        if norm(residual) < 1e-9 {
            return Err(Error::Config("stain vectors are collinear".into()));
        }
        Self::new([h, normalized(residual), d])
    }

    pub fn hdab() -> Self {
        Self::from_stain_vectors(HEMATOXYLIN, DAB).expect("reference basis is valid")
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.rows
    }

    pub fn inverse(&self) -> &[[f64; 3]; 3] {
        &self.inverse
    }

    /// Concentrations `c` with `od = c · M` (unclamped).
    pub fn unmix(&self, od: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|j| (0..3).map(|i| od[i] * self.inverse[i][j]).sum())
    }

    /// Transmitted unit-range RGB of concentrations `c`: `10^(-c·M)` per channel.
    pub fn render(&self, c: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|j| {
            let od: f64 = (0..3).map(|i| c[i] * self.rows[i][j]).sum();
            10f64.powf(-od)
        })
    }
}

impl Default for StainMatrix {
    fn default() -> Self {
        Self::hdab()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(P_real ‖ P_gen)`.
    RealGen,
    /// `KL(P_gen ‖ P_real)`.
    GenReal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StainConfig {
    /// Rows (hematoxylin, residual, DAB); `None` selects the standard H-DAB basis.
    pub matrix: Option<[[f64; 3]; 3]>,
    pub od_eps: f64,
    pub hist_range: [f64; 2],
    pub hist_bins: usize,
    pub hist_smoothing: f64,
    pub top_fraction: f64,
    pub kl_direction: KlDirection,
}

impl Default for StainConfig {
    fn default() -> Self {
        StainConfig {
            matrix: None,
            od_eps: 1.0 / 255.0,
            hist_range: [0.0, 3.0],
            hist_bins: 256,
            hist_smoothing: 1e-8,
            top_fraction: 0.10,
            kl_direction: KlDirection::RealGen,
        }
    }
}

impl StainConfig {
    pub fn stain_matrix(&self) -> Result<StainMatrix> {
        match self.matrix {
            Some(rows) => StainMatrix::new(rows),
            None => Ok(StainMatrix::hdab()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stain_matrix()?;
        if !(self.od_eps > 0.0) {
            return Err(Error::Config("stain.od_eps must be > 0".into()));
        }
        if !(self.hist_range[1] > self.hist_range[0]) {
            return Err(Error::Config("stain.hist_range must be increasing".into()));
        }
        if self.hist_bins == 0 || !(self.hist_smoothing > 0.0) {
            return Err(Error::Config("stain histogram needs bins > 0 and smoothing > 0".into()));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::Config("stain.top_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-pixel optical densities, `H×W×3`, all finite and non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct OpticalDensityMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Per-pixel stain concentrations, `H×W×3`, clamped at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Concentrations {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Concentrations {
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn dab(&self) -> DabChannel {
        DabChannel(self.channel(DAB_INDEX))
    }
}

/// Deconvolved DAB concentration per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DabChannel(pub Vec<f64>);

/// `OD = -log10(max(pixel, eps))` per channel of a unit-range image.
pub fn rgb_to_od(img: &RgbImage, eps: f64) -> Result<OpticalDensityMap> {
    if !(eps > 0.0) {
        return Err(Error::Data(format!("od eps must be positive, got {eps}")));
    }
    od_from_values(img.to_unit().data(), img.height(), img.width(), eps)
}

/// OD of raw interleaved unit-range RGB values.
pub fn od_from_values(values: &[f64], height: usize, width: usize, eps: f64) -> Result<OpticalDensityMap> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite pixel value".into()));
    }
    let data = values.iter().map(|&v| -v.max(eps).log10()).map(|v| v.max(0.0)).collect();
    Ok(OpticalDensityMap { height, width, data })
}

pub fn deconvolve(od: &OpticalDensityMap, m: &StainMatrix) -> Concentrations {
    let mut data = Vec::with_capacity(od.data.len());
    for px in od.data.chunks_exact(3) {
        let c = m.unmix([px[0], px[1], px[2]]);
        data.extend(c.iter().map(|v| v.max(0.0)));
    }
    Concentrations { height: od.height, width: od.width, data }
}

/// DAB channel of an image (any range).
pub fn dab_channel(img: &RgbImage, m: &StainMatrix, eps: f64) -> Result<DabChannel> {
    Ok(deconvolve(&rgb_to_od(img, eps)?, m).dab())
}

/// Number of pixels that make up the top fraction: `ceil(fraction · n)`, at least 1.
pub fn top_count(n: usize, fraction: f64) -> usize {
    // the small slack keeps e.g. 0.1 · 30 from rounding up to 4
    (((fraction * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

/// Mean of the `ceil(top_fraction · N)` largest values.
pub fn dab_intensity_score(dab: &DabChannel, top_fraction: f64) -> Result<f64> {
    if dab.0.is_empty() {
        return Err(Error::Data("empty DAB channel".into()));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::Data(format!("top fraction {top_fraction} outside (0, 1]")));
    }
    let k = top_count(dab.0.len(), top_fraction);
    let mut v = dab.0.clone();
    v.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(v[..k].iter().sum::<f64>() / k as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DabHistogram {
    /// Fraction of pixels per bin; sums to 1.
    pub bins: Vec<f64>,
    pub range: [f64; 2],
}

impl DabHistogram {
    /// Fixed-range histogram; values outside the range fall into the edge bins.
    pub fn build(values: &[f64], bins: usize, range: [f64; 2]) -> Self {
        let mut counts = vec![0.0; bins];
        let width = (range[1] - range[0]) / bins as f64;
        for &v in values {
            let b = ((v - range[0]) / width).floor();
            let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(bins - 1) };
            counts[b] += 1.0;
        }
        let n = values.len().max(1) as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        DabHistogram { bins: counts, range }
    }

    /// Adds `eps` to every bin and renormalizes.
    pub fn smoothed(&self, eps: f64) -> Vec<f64> {
        let total: f64 = self.bins.iter().map(|b| b + eps).sum();
        self.bins.iter().map(|b| (b + eps) / total).collect()
    }
}

/// `Σ p·ln(p/q)` over two strictly positive distributions.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

/// KL divergence between smoothed fixed-range histograms of two DAB channels.
pub fn dab_kl(generated: &DabChannel, real: &DabChannel, cfg: &StainConfig) -> f64 {
    let hg = DabHistogram::build(&generated.0, cfg.hist_bins, cfg.hist_range).smoothed(cfg.hist_smoothing);
    let hr = DabHistogram::build(&real.0, cfg.hist_bins, cfg.hist_range).smoothed(cfg.hist_smoothing);
    match cfg.kl_direction {
        KlDirection::RealGen => kl_divergence(&hr, &hg),
        KlDirection::GenReal => kl_divergence(&hg, &hr),
    }
}

pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Data(format!(
            "pearson_r needs equal lengths >= 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// DAB concentration map `[n, 1, h, w]` of signed-range images `[n, 3, h, w]`,
/// differentiable in the images.
pub fn dab_map(images: &Tensor, m: &StainMatrix, eps: f64) -> Tensor {
    let od = images.affine(0.5, 0.5).clamp_min(eps).log10().neg();
    let column: Vec<f64> = (0..3).map(|i| m.inverse()[i][DAB_INDEX]).collect();
    od.conv2d(&Tensor::from_vec(column, &[1, 3, 1, 1]), 1, 0).relu()
}

/// Per-image mean of the top-fraction DAB values, `[n, 1]`. Selection is a hard
/// top-k on current values; gradients reach only the selected pixels.
pub fn dab_scores(images: &Tensor, m: &StainMatrix, eps: f64, top_fraction: f64) -> Tensor {
    let map = dab_map(images, m, eps);
    let (n, _, h, w) = map.dims4();
    let px = h * w;
    let k = top_count(px, top_fraction);
    let mut index = Vec::with_capacity(n * k);
    for b in 0..n {
        let vals = &map.data()[b * px..(b + 1) * px];
        let mut order: Vec<usize> = (0..px).collect();
        order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]).then(i.cmp(&j)));
        index.extend(order[..k].iter().map(|&i| b * px + i));
    }
    map.gather_flat(Arc::new(index), &[n, k]).mean_keepdim(&[1])
}

/// `mean_n |score(generated_n) - score(target_n)|` on signed-range batches. The
/// target side is a constant.
pub fn dab_loss(generated: &Tensor, target: &Tensor, m: &StainMatrix, cfg: &StainConfig) -> Tensor {
    let sg = dab_scores(generated, m, cfg.od_eps, cfg.top_fraction);
    let st = vstain_tensor::no_grad(|| dab_scores(&target.detach(), m, cfg.od_eps, cfg.top_fraction));
    sg.sub(&st).abs().mean_all()
}

/// [`dab_loss`] on a single pair of images.
pub fn dab_loss_images(generated: &RgbImage, target: &RgbImage, m: &StainMatrix, cfg: &StainConfig) -> Result<f64> {
    if (generated.height(), generated.width()) != (target.height(), target.width()) {
        return Err(Error::Shape("dab_loss images differ in size".into()));
    }
    let g = generated.with_range(ValueRange::Signed).to_tensor();
    let t = target.with_range(ValueRange::Signed).to_tensor();
    Ok(dab_loss(&g, &t, m, cfg).item())
}

/// Renders a unit-range image from per-pixel concentrations.
pub fn render_image(height: usize, width: usize, m: &StainMatrix, conc: impl Fn(usize, usize) -> [f64; 3]) -> Result<RgbImage> {
    RgbImage::from_fn(height, width, ValueRange::Unit, |y, x| m.render(conc(y, x)))
}
