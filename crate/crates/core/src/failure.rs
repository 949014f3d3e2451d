//! Tissue-stratified failure characterization and the failure predictor.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::render::{draw_text, fill_rect, tile_grid, BLACK, WHITE};
use crate::resample::Filter;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Stub,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig { l2: 1e-3, learning_rate: 0.5, iterations: 500, train_fraction: 0.8, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FailureConfig {
    /// A pair fails when its DAB KL is strictly above this value.
    pub threshold: f64,
    pub labels: Vec<String>,
    pub classifier: ClassifierKind,
    /// Side the whole image is resized to before classification.
    pub classifier_side: usize,
    pub worst_k: usize,
    pub predictor: LogisticConfig,
}

impl Default for FailureConfig {
    fn default() -> Self {
        FailureConfig {
            threshold: 0.5,
            labels: ["invasive carcinoma", "adipose", "necrosis", "background", "tissue-5", "tissue-6", "tissue-7"]
                .map(String::from)
                .to_vec(),
            classifier: ClassifierKind::Stub,
            classifier_side: 224,
            worst_k: 4,
            predictor: LogisticConfig::default(),
        }
    }
}

impl FailureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() || self.classifier_side == 0 || self.worst_k == 0 {
            return Err(Error::Config("failure.labels, classifier_side and worst_k must be non-empty/positive".into()));
        }
        let p = &self.predictor;
        if !(0.0 < p.train_fraction && p.train_fraction < 1.0) || p.l2 < 0.0 || p.learning_rate <= 0.0 {
            return Err(Error::Config("failure.predictor needs train_fraction in (0, 1), l2 >= 0, learning_rate > 0".into()));
        }
        Ok(())
    }

    pub fn classifier(&self) -> Result<Box<dyn TissueClassifier>> {
        match self.classifier {
            ClassifierKind::Stub => Ok(Box::new(StubClassifier::new(self.labels.clone(), self.classifier_side))),
            ClassifierKind::External => Err(Error::Dependency {
                name: "zero-shot tissue classifier".into(),
                detail: "no vision-language classifier runtime is bundled; implement TissueClassifier or use classifier = \"stub\"".into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TissueLabel {
    pub index: usize,
    pub name: String,
}

/// Maps a `side×side` image to one score per label.
pub trait TissueClassifier: Send + Sync {
    fn labels(&self) -> &[String];
    fn input_side(&self) -> usize;
    fn scores(&self, img: &RgbImage) -> Result<Vec<f64>>;
}

/// Buckets the mean unit-range intensity into equal-width bins, one per label.
#[derive(Clone, Debug)]
pub struct StubClassifier {
    labels: Vec<String>,
    side: usize,
}

impl StubClassifier {
    pub fn new(labels: Vec<String>, side: usize) -> Self {
        StubClassifier { labels, side }
    }
}

impl TissueClassifier for StubClassifier {
    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn input_side(&self) -> usize {
        self.side
    }

    fn scores(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let n = self.labels.len();
        let bucket = ((img.mean_intensity() * n as f64).floor() as usize).min(n - 1);
        Ok((0..n).map(|i| if i == bucket { 1.0 } else { 0.0 }).collect())
    }
}

/// Resizes the whole image to the classifier's side and takes the argmax; ties go
/// to the lowest label index.
pub fn classify_tissue(img: &RgbImage, classifier: &dyn TissueClassifier) -> Result<TissueLabel> {
    let side = classifier.input_side();
    let filter = if img.height() >= side && img.width() >= side { Filter::Area } else { Filter::Bicubic };
    let small = img.to_unit().resize(side, side, filter);
    let scores = classifier.scores(&small)?;
    if scores.len() != classifier.labels().len() || scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("classifier returned malformed scores".into()));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(TissueLabel { index: best, name: classifier.labels()[best].clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub image_id: String,
    pub stain: String,
    pub tissue: TissueLabel,
    pub dab_kl: f64,
    pub failed: bool,
}

impl FailureRecord {
    pub fn new(image_id: impl Into<String>, stain: impl Into<String>, tissue: TissueLabel, dab_kl: f64, threshold: f64) -> Self {
        FailureRecord { image_id: image_id.into(), stain: stain.into(), tissue, dab_kl, failed: dab_kl > threshold }
    }
}

/// Fraction of records with `dab_kl > threshold`.
pub fn failure_rate(records: &[FailureRecord], threshold: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.dab_kl > threshold).count() as f64 / records.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueStats {
    pub tissue: TissueLabel,
    pub n: usize,
    pub failure_rate: f64,
    pub mean_dab_kl: f64,
}

/// Per-tissue counts, failure rates and mean KL in label order. With several
/// stains in one tissue, rate and mean are averaged over stains.
pub fn stratify(records: &[FailureRecord]) -> Result<Vec<TissueStats>> {
    if records.is_empty() {
        return Err(Error::Data("no failure records to stratify".into()));
    }
    let mut groups: BTreeMap<&TissueLabel, BTreeMap<&str, Vec<&FailureRecord>>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.tissue).or_default().entry(r.stain.as_str()).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|(tissue, by_stain)| {
            let k = by_stain.len() as f64;
            let mut rate = 0.0;
            let mut mean = 0.0;
            let mut n = 0;
            for rs in by_stain.values() {
                let m = rs.len() as f64;
                rate += rs.iter().filter(|r| r.failed).count() as f64 / m;
                mean += rs.iter().map(|r| r.dab_kl).sum::<f64>() / m;
                n += rs.len();
            }
            TissueStats { tissue: tissue.clone(), n, failure_rate: rate / k, mean_dab_kl: mean / k }
        })
        .collect())
}

/// Per stain, the `k` highest-KL records in descending order (ties by id).
pub fn worst_cases(records: &[FailureRecord], k: usize) -> BTreeMap<String, Vec<FailureRecord>> {
    let mut by_stain: BTreeMap<String, Vec<FailureRecord>> = BTreeMap::new();
    for r in records {
        by_stain.entry(r.stain.clone()).or_default().push(r.clone());
    }
    for (stain, rs) in by_stain.iter_mut() {
        rs.sort_by(|a, b| b.dab_kl.total_cmp(&a.dab_kl).then_with(|| a.image_id.cmp(&b.image_id)));
        if rs.len() < k {
            log::warn!("stain {stain}: only {} records for a top-{k} grid", rs.len());
        }
        rs.truncate(k);
    }
    by_stain
}

/// H&E, real IHC and generated images of one record.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub hne: RgbImage,
    pub real: RgbImage,
    pub generated: RgbImage,
}

/// One grid per stain: rows are the worst records, columns H&E | real | generated,
/// each generated tile labelled with its KL.
pub fn export_worst_cases(
    records: &[FailureRecord],
    images: &BTreeMap<String, Triplet>,
    k: usize,
    tile: usize,
) -> Result<BTreeMap<String, (RgbImage, Vec<FailureRecord>)>> {
    let mut out = BTreeMap::new();
    for (stain, rs) in worst_cases(records, k) {
        let rows = rs
            .iter()
            .map(|r| {
                let t = images.get(&r.image_id).ok_or_else(|| Error::Data(format!("no images for record {}", r.image_id)))?;
                Ok(vec![t.hne.clone(), t.real.clone(), t.generated.clone()])
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grid = tile_grid(&rows, tile)?;
        for (i, r) in rs.iter().enumerate() {
            let label = format!("KL {:.2}", r.dab_kl);
            let (y, x) = (i * tile + 1, 2 * tile + 1);
            fill_rect(&mut grid, y, x, 9, (label.len() * 8 + 2).min(tile - 1), WHITE);
            draw_text(&mut grid, y + 1, x + 1, &label, BLACK, 1);
        }
        out.insert(stain, (grid, rs));
    }
    Ok(out)
}

fn check_labels(scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Data("scores and labels differ in length".into()));
    }
    let p = labels.iter().filter(|&&l| l).count() as u64;
    let n = labels.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::Data("AUC needs both positive and negative labels".into()));
    }
    Ok((p, n))
}

/// AUC by the Mann–Whitney rank statistic with mid-ranks for ties.
pub fn auc_rank(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, n) = check_labels(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled mid-ranks keep the arithmetic integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        twice_rank_sum += twice_mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// AUC by sweeping thresholds from high to low and integrating the ROC curve with
/// the trapezoid rule.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, n) = check_labels(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let (tp0, fp0) = (tp, fp);
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        twice_area += (fp - fp0) * (tp + tp0);
        i = j;
    }
    Ok(twice_area as f64 / (2 * p * n) as f64)
}

/// L2-regularized logistic regression on standardized inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LogisticModel {
    pub fn fit(x: &[Vec<f64>], y: &[bool], cfg: &LogisticConfig) -> Result<LogisticModel> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::Data("logistic fit needs matching non-empty inputs".into()));
        }
        let d = x[0].len();
        if x.iter().any(|v| v.len() != d) {
            return Err(Error::Shape("embeddings differ in dimension".into()));
        }
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = x.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if var > 1e-24 { var.sqrt() } else { 1.0 }
            })
            .collect();
        let z: Vec<Vec<f64>> = x.iter().map(|v| (0..d).map(|j| (v[j] - mean[j]) / scale[j]).collect()).collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..cfg.iterations {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (zi, &yi) in z.iter().zip(y) {
                let e = sigmoid(b + zi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>()) - if yi { 1.0 } else { 0.0 };
                gb += e;
                for j in 0..d {
                    gw[j] += e * zi[j];
                }
            }
            for j in 0..d {
                w[j] -= cfg.learning_rate * (gw[j] / n as f64 + cfg.l2 * w[j]);
            }
            b -= cfg.learning_rate * gb / n as f64;
        }
        Ok(LogisticModel { mean, scale, weights: w, bias: b })
    }

    /// Failure probability of one embedding.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let z: f64 = x.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.scale[j] * self.weights[j]).sum();
        sigmoid(self.bias + z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub model: LogisticModel,
    pub auc: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Fits the failure predictor on a seeded split stratified by label and reports
/// held-out AUC.
pub fn train_failure_predictor(embeddings: &[Vec<f64>], failed: &[bool], cfg: &LogisticConfig) -> Result<PredictorReport> {
    if embeddings.len() != failed.len() {
        return Err(Error::Data("embeddings and labels differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..failed.len()).filter(|&i| failed[i] == class).collect();
        if idx.len() < 2 {
            return Err(Error::Data("failure predictor needs at least two samples of each class".into()));
        }
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    let pick = |ix: &[usize]| -> (Vec<Vec<f64>>, Vec<bool>) { (ix.iter().map(|&i| embeddings[i].clone()).collect(), ix.iter().map(|&i| failed[i]).collect()) };
    let (xtr, ytr) = pick(&train);
    let (xte, yte) = pick(&test);
    let model = LogisticModel::fit(&xtr, &ytr, cfg)?;
    let scores: Vec<f64> = xte.iter().map(|x| model.predict(x)).collect();
    let auc = auc_rank(&scores, &yte)?;
    Ok(PredictorReport { model, auc, n_train: train.len(), n_test: test.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ValueRange;

    fn label(i: usize) -> TissueLabel {
        TissueLabel { index: i, name: format!("t{i}") }
    }

    #[test]
    fn threshold_is_strict() {
        assert!(!FailureRecord::new("a", "HER2", label(0), 0.5, 0.5).failed);
        assert!(FailureRecord::new("a", "HER2", label(0), 0.5000001, 0.5).failed);
    }

    #[test]
    fn stub_buckets_mean_intensity() {
        let c = StubClassifier::new(FailureConfig::default().labels, 8);
        let dark = RgbImage::constant(16, 16, [0.05; 3], ValueRange::Unit).unwrap();
        let light = RgbImage::constant(16, 16, [0.99; 3], ValueRange::Unit).unwrap();
        assert_eq!(classify_tissue(&dark, &c).unwrap().index, 0);
        assert_eq!(classify_tissue(&light, &c).unwrap().index, 6);
    }

    #[test]
    fn external_classifier_names_dependency() {
        let cfg = FailureConfig { classifier: ClassifierKind::External, ..FailureConfig::default() };
        match cfg.classifier() {
            Err(Error::Dependency { name, .. }) => assert!(name.contains("classifier")),
            _ => panic!("expected a dependency error"),
        }
    }

    #[test]
    fn separable_embeddings_give_auc_one() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 } + 0.01 * i as f64, 0.3]).collect();
        let y: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let r = train_failure_predictor(&x, &y, &LogisticConfig::default()).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.n_train + r.n_test, 40);
        assert!(train_failure_predictor(&x, &[true; 40], &LogisticConfig::default()).is_err());
    }
}
