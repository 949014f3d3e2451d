//! Deterministic-crop test protocol and the metric suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use vstain_tensor::no_grad;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::generator::{build_1024_variant, param_count, Generator, GeneratorConfig};
use crate::image::RgbImage;
use crate::perceptual::{feature_distance, FeatureExtractor};
use crate::processor::ProcessorConfig;
use crate::stain::{dab_channel, dab_intensity_score, dab_kl, pearson_r, StainConfig, StainMatrix};
use crate::training::{generate_images, parallel_map, PairedSample, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Test images are `source_side` squares cut into four `crop` quadrants.
    pub source_side: usize,
    pub crop: usize,
    /// Diagonal loading of both covariances when samples do not exceed the dimension.
    pub fid_shrinkage: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    /// Extra width of the 1024-px variant used for parameter-overhead reporting.
    pub variant_channels: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { source_side: 1024, crop: 512, fid_shrinkage: 1e-6, ssim_window: 11, ssim_sigma: 1.5, variant_channels: 32 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.source_side != 2 * self.crop {
            return Err(Error::Config("eval.source_side must be twice eval.crop".into()));
        }
        if self.ssim_window == 0 || self.ssim_window % 2 == 0 || self.ssim_sigma <= 0.0 {
            return Err(Error::Config("eval.ssim_window must be odd and eval.ssim_sigma positive".into()));
        }
        if self.fid_shrinkage < 0.0 {
            return Err(Error::Config("eval.fid_shrinkage must be non-negative".into()));
        }
        Ok(())
    }
}

/// One crop of a test image with its top-left origin.
#[derive(Clone, Debug)]
pub struct TestCrop {
    pub origin: (usize, usize),
    pub image: RgbImage,
}

/// The four non-overlapping quadrants of a `2·crop` square, row-major.
pub fn deterministic_test_crops(img: &RgbImage, crop: usize) -> Result<Vec<TestCrop>> {
    if img.height() != 2 * crop || img.width() != 2 * crop {
        return Err(Error::Shape(format!(
            "test image is {}×{}, expected {}×{}",
            img.height(),
            img.width(),
            2 * crop,
            2 * crop
        )));
    }
    [(0, 0), (0, crop), (crop, 0), (crop, crop)]
        .into_iter()
        .map(|(y, x)| Ok(TestCrop { origin: (y, x), image: img.crop(y, x, crop, crop)? }))
        .collect()
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// SSIM with a Gaussian window over the valid region, on unit-range values with
/// `C1 = 0.01²`, `C2 = 0.03²`, averaged over channels.
pub fn ssim_with(a: &RgbImage, b: &RgbImage, window: usize, sigma: f64) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape("ssim inputs differ in size".into()));
    }
    let (h, w) = (a.height(), a.width());
    if h < window || w < window {
        return Err(Error::Shape(format!("ssim needs at least {window}×{window} pixels, got {h}×{w}")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = gaussian_window(window, sigma);
    let (ua, ub) = (a.to_unit(), b.to_unit());
    let mut total = 0.0;
    for c in 0..3 {
        let (x, y) = (ua.channel(c), ub.channel(c));
        let f = |p: &[f64]| filter_valid(p, h, w, &k);
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).collect::<Vec<f64>>();
        let (mx, my) = (f(&x), f(&y));
        let (sxx, syy, sxy) = (f(&prod(&x, &x)), f(&prod(&y, &y)), f(&prod(&x, &y)));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (vx, vy, cxy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
            acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / 3.0)
}

/// SSIM with the standard 11×11, σ = 1.5 window.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    ssim_with(a, b, 11, 1.5)
}

fn check_features(a: &[Vec<f64>], b: &[Vec<f64>], min: usize) -> Result<usize> {
    if a.len() < min || b.len() < min {
        return Err(Error::Data(format!("need at least {min} feature vectors per set")));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Shape("feature vectors must share a non-zero dimension".into()));
    }
    Ok(d)
}

fn mean_cov(x: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.len(), x[0].len());
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mu = DVector::from_fn(d, |j, _| m.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets. `shrinkage` is
/// added to both covariance diagonals when a set has no more samples than
/// dimensions; such sets are rejected when `shrinkage` is zero.
pub fn fid(real: &[Vec<f64>], fake: &[Vec<f64>], shrinkage: f64) -> Result<f64> {
    let d = check_features(real, fake, 2)?;
    let degenerate = real.len() <= d || fake.len() <= d;
    if degenerate && shrinkage <= 0.0 {
        return Err(Error::Numeric(format!(
            "covariance of {d}-dimensional features from {} and {} samples is singular; enable shrinkage",
            real.len(),
            fake.len()
        )));
    }
    let (mu_r, mut cov_r) = mean_cov(real);
    let (mu_f, mut cov_f) = mean_cov(fake);
    if degenerate {
        for i in 0..d {
            cov_r[(i, i)] += shrinkage;
            cov_f[(i, i)] += shrinkage;
        }
    }
    // Tr((Σr Σf)^½) = Tr((Σr^½ Σf Σr^½)^½)
    let a = psd_sqrt(&cov_r);
    let inner = &a * &cov_f * &a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let v = (mu_r - mu_f).norm_squared() + cov_r.trace() + cov_f.trace() - 2.0 * tr_sqrt;
    if !v.is_finite() {
        return Err(Error::Numeric("FID is not finite".into()));
    }
    Ok(v)
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d + 1.0).powi(3)
}

/// Unbiased MMD² with kernel `(xᵀy/d + 1)³`, multiplied by 1000.
pub fn kid(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    check_features(real, fake, 2)?;
    let (m, n) = (real.len() as f64, fake.len() as f64);
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += poly_kernel(&s[i], &s[j]);
                }
            }
        }
        acc
    };
    let mut cross = 0.0;
    for x in real {
        for y in fake {
            cross += poly_kernel(x, y);
        }
    }
    Ok(1000.0 * (within(real) / (m * (m - 1.0)) + within(fake) / (n * (n - 1.0)) - 2.0 * cross / (m * n)))
}

/// Metrics for one stain. Values undefined on the data (too few samples, constant
/// scores) are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainMetrics {
    pub fid: Option<f64>,
    pub kid_x1k: Option<f64>,
    pub ssim: f64,
    pub lpips: f64,
    pub pearson_r: Option<f64>,
    pub dab_kl: f64,
    pub n_images: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroAverages {
    pub fid: Option<f64>,
    pub kid_x1k: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips: Option<f64>,
    pub pearson_r: Option<f64>,
    pub dab_kl: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub n_models: usize,
    pub params: usize,
    pub resolution: usize,
    /// `unified` or `specialist`.
    pub mode: String,
    pub checkpoint_step: u64,
    pub protocol: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_stain: BTreeMap<String, StainMetrics>,
    pub macro_avg: MacroAverages,
    /// Pairs without readable ground truth, per stain.
    pub skipped: BTreeMap<String, usize>,
    pub metadata: ReportMetadata,
}

fn mean_defined(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MacroAverages {
    /// Unweighted mean over stains of each metric, skipping undefined entries.
    pub fn over(per_stain: &BTreeMap<String, StainMetrics>) -> MacroAverages {
        let s = || per_stain.values();
        MacroAverages {
            fid: mean_defined(s().map(|m| m.fid)),
            kid_x1k: mean_defined(s().map(|m| m.kid_x1k)),
            ssim: mean_defined(s().map(|m| Some(m.ssim))),
            lpips: mean_defined(s().map(|m| Some(m.lpips))),
            pearson_r: mean_defined(s().map(|m| m.pearson_r)),
            dab_kl: mean_defined(s().map(|m| Some(m.dab_kl))),
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl MetricReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>10} {:>10} {:>8} {:>8} {:>9} {:>8} {:>6}", "stain", "FID", "KIDx1k", "SSIM", "LPIPS", "pearson", "DAB-KL", "n");
        for (stain, m) in &self.per_stain {
            let _ = writeln!(
                s,
                "{:<8} {:>10} {:>10} {:>8.4} {:>8.4} {:>9} {:>8.4} {:>6}",
                stain,
                cell(m.fid),
                cell(m.kid_x1k),
                m.ssim,
                m.lpips,
                cell(m.pearson_r),
                m.dab_kl,
                m.n_images
            );
        }
        let a = &self.macro_avg;
        let _ = writeln!(
            s,
            "{:<8} {:>10} {:>10} {:>8} {:>8} {:>9} {:>8}",
            "macro",
            cell(a.fid),
            cell(a.kid_x1k),
            cell(a.ssim),
            cell(a.lpips),
            cell(a.pearson_r),
            cell(a.dab_kl)
        );
        let m = &self.metadata;
        let _ = writeln!(
            s,
            "models {}  params {}  resolution {}  mode {}  step {}\nprotocol: {}",
            m.n_models, m.params, m.resolution, m.mode, m.checkpoint_step, m.protocol
        );
        s
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        let p = dir.join("report.json");
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("report.txt");
        std::fs::write(&p, self.to_table()).map_err(|e| Error::io(&p, e))
    }
}

/// A generated crop and its ground truth.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub stain: String,
    pub id: String,
    pub generated: RgbImage,
    pub real: RgbImage,
}

fn embed_all(images: &[&RgbImage], extractor: &dyn FeatureExtractor) -> Vec<Vec<f64>> {
    no_grad(|| {
        images
            .iter()
            .map(|img| {
                let e = extractor.embed(&img.to_signed().to_tensor());
                e.to_vec()
            })
            .collect()
    })
}

/// Computes every metric per stain from generated/real crop pairs.
pub fn compute_report(
    pairs: &[EvalPair],
    skipped: &BTreeMap<String, usize>,
    extractor: &dyn FeatureExtractor,
    stain_cfg: &StainConfig,
    cfg: &EvalConfig,
    metadata: ReportMetadata,
) -> Result<MetricReport> {
    let m = stain_cfg.stain_matrix()?;
    let mut groups: BTreeMap<&str, Vec<&EvalPair>> = BTreeMap::new();
    for p in pairs {
        groups.entry(p.stain.as_str()).or_default().push(p);
    }
    let mut per_stain = BTreeMap::new();
    for (stain, group) in groups {
        per_stain.insert(stain.to_string(), stain_metrics(&group, skipped.get(stain).copied().unwrap_or(0), extractor, stain_cfg, &m, cfg)?);
    }
    Ok(MetricReport { macro_avg: MacroAverages::over(&per_stain), per_stain, skipped: skipped.clone(), metadata })
}

fn stain_metrics(
    group: &[&EvalPair],
    skipped: usize,
    extractor: &dyn FeatureExtractor,
    stain_cfg: &StainConfig,
    m: &StainMatrix,
    cfg: &EvalConfig,
) -> Result<StainMetrics> {
    let n = group.len();
    let mut ssim_sum = 0.0;
    let mut lpips_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut gen_scores = Vec::with_capacity(n);
    let mut real_scores = Vec::with_capacity(n);
    for p in group {
        ssim_sum += ssim_with(&p.generated, &p.real, cfg.ssim_window, cfg.ssim_sigma)?;
        lpips_sum += no_grad(|| {
            feature_distance(extractor, &p.generated.to_signed().to_tensor(), &p.real.to_signed().to_tensor()).item()
        });
        let dg = dab_channel(&p.generated, m, stain_cfg.od_eps)?;
        let dr = dab_channel(&p.real, m, stain_cfg.od_eps)?;
        kl_sum += dab_kl(&dg, &dr, stain_cfg);
        gen_scores.push(dab_intensity_score(&dg, stain_cfg.top_fraction)?);
        real_scores.push(dab_intensity_score(&dr, stain_cfg.top_fraction)?);
    }
    let fg = embed_all(&group.iter().map(|p| &p.generated).collect::<Vec<_>>(), extractor);
    let fr = embed_all(&group.iter().map(|p| &p.real).collect::<Vec<_>>(), extractor);
    let (fid_v, kid_v) = if n >= 2 { (Some(fid(&fr, &fg, cfg.fid_shrinkage)?), Some(kid(&fr, &fg)?)) } else { (None, None) };
    let r = match pearson_r(&gen_scores, &real_scores) {
        Ok(r) => Some(r),
        Err(Error::UndefinedCorrelation(_) | Error::Data(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(StainMetrics {
        fid: fid_v,
        kid_x1k: kid_v,
        ssim: ssim_sum / n as f64,
        lpips: lpips_sum / n as f64,
        pearson_r: r,
        dab_kl: kl_sum / n as f64,
        n_images: n,
        skipped,
    })
}

/// Everything `evaluate_run` needs besides the test samples.
pub struct EvalContext<'a> {
    pub generator: &'a Generator,
    pub backbone: &'a dyn Backbone,
    pub grid_side: usize,
    pub extractor: &'a dyn FeatureExtractor,
    pub stain: &'a StainConfig,
    pub eval: &'a EvalConfig,
    pub vocab: &'a [String],
    pub workers: usize,
}

/// Generates every test crop with the given (EMA) generator, optionally writes
/// outputs as `<out>/<stain>/<source_id>_c<k>.png`, and computes the report.
/// Pairs whose ground truth cannot be read are skipped and counted.
pub fn evaluate_run(samples: &[PairedSample], ctx: &EvalContext, out: Option<&Path>, metadata: ReportMetadata) -> Result<MetricReport> {
    let test: Vec<&PairedSample> = samples.iter().filter(|s| s.split == Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Data("manifest has no test split samples".into()));
    }
    let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
    let mut jobs = Vec::new();
    for s in test {
        let real = match RgbImage::load(&s.ihc) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", s.source_id);
                *skipped.entry(s.stain.clone()).or_default() += 1;
                continue;
            }
        };
        let token = s.token(ctx.vocab)?;
        let hne = RgbImage::load(&s.hne)?;
        let hc = deterministic_test_crops(&hne, ctx.eval.crop)?;
        let rc = deterministic_test_crops(&real, ctx.eval.crop)?;
        for (k, (h, r)) in hc.into_iter().zip(rc).enumerate() {
            jobs.push((s, k, token, h.image, r.image));
        }
    }
    let generated = parallel_map(jobs.len(), ctx.workers, |i| {
        let (_, _, token, h, _) = &jobs[i];
        let g = generate_images(ctx.generator, ctx.backbone, ctx.grid_side, std::slice::from_ref(h), &[*token])?;
        Ok(g.into_iter().next().expect("one output").to_unit())
    })?;
    let mut pairs = Vec::with_capacity(jobs.len());
    for ((s, k, _, _, r), g) in jobs.into_iter().zip(generated) {
        let id = format!("{}_c{k}", s.source_id);
        if let Some(dir) = out {
            g.save(&dir.join(&s.stain).join(format!("{id}.png")))?;
        }
        pairs.push(EvalPair { stain: s.stain.clone(), id, generated: g, real: r });
    }
    compute_report(&pairs, &skipped, ctx.extractor, ctx.stain, ctx.eval, metadata)
}

/// Trainable generator-side parameter counts of the base and 1024-px configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub base: usize,
    pub variant: usize,
    pub variant_resolution: usize,
    pub relative_increase: f64,
}

pub fn param_report(gcfg: &GeneratorConfig, pcfg: &ProcessorConfig, extra_channels: usize) -> Result<ParamReport> {
    let base = param_count(gcfg, pcfg)?;
    let vcfg = build_1024_variant(gcfg, extra_channels)?;
    let variant = param_count(&vcfg, pcfg)?;
    Ok(ParamReport {
        base,
        variant,
        variant_resolution: vcfg.resolution,
        relative_increase: (variant as f64 - base as f64) / base as f64,
    })
}
