//! Paired manifests, synchronized random crops, unified multi-stain sampling and a
//! synthetic paired-data generator.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{RgbImage, ValueRange};
use crate::stain::StainMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedSample {
    pub hne: PathBuf,
    pub ihc: PathBuf,
    pub stain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub split: Split,
    pub source_id: String,
}

impl PairedSample {
    /// Vocabulary key: the class when present, else the stain.
    pub fn token_key(&self) -> &str {
        self.class.as_deref().unwrap_or(&self.stain)
    }

    pub fn token(&self, vocab: &[String]) -> Result<usize> {
        let key = self.token_key();
        vocab.iter().position(|v| v == key).ok_or_else(|| Error::InvalidToken {
            token: key.to_string(),
            valid: vocab.join(", "),
        })
    }
}

/// Reads a line-delimited manifest; relative paths resolve against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PairedSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut s: PairedSample = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        s.hne = base.join(&s.hne);
        s.ihc = base.join(&s.ihc);
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("manifest {} is empty", path.display())));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, samples: &[PairedSample]) -> Result<()> {
    let mut text = String::new();
    for s in samples {
        text.push_str(&serde_json::to_string(s).map_err(|e| Error::Data(e.to_string()))?);
        text.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Crop origin and flips shared by both images of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub y: usize,
    pub x: usize,
    pub size: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl CropSpec {
    pub fn draw(height: usize, width: usize, size: usize, rng: &mut impl Rng) -> Result<CropSpec> {
        if height < size || width < size {
            return Err(Error::Data(format!("source {height}x{width} smaller than crop {size}")));
        }
        Ok(CropSpec {
            y: rng.random_range(0..=height - size),
            x: rng.random_range(0..=width - size),
            size,
            flip_h: rng.random(),
            flip_v: rng.random(),
        })
    }

    pub fn apply(&self, img: &RgbImage) -> Result<RgbImage> {
        let mut c = img.crop(self.y, self.x, self.size, self.size)?;
        if self.flip_h {
            c = c.flip_horizontal();
        }
        if self.flip_v {
            c = c.flip_vertical();
        }
        Ok(c)
    }
}

/// Identical crop and flips on both images, returned in signed range.
pub fn sample_training_pair(
    hne: &RgbImage,
    ihc: &RgbImage,
    crop: usize,
    rng: &mut impl Rng,
) -> Result<(RgbImage, RgbImage, CropSpec)> {
    if (hne.height(), hne.width()) != (ihc.height(), ihc.width()) {
        return Err(Error::Data("H&E and IHC sizes differ".into()));
    }
    let spec = CropSpec::draw(hne.height(), hne.width(), crop, rng)?;
    Ok((spec.apply(hne)?.to_signed(), spec.apply(ihc)?.to_signed(), spec))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Balancing {
    /// Each stain drawn in proportion to its sample count.
    Proportional,
    /// Each stain equally likely.
    Uniform,
}

/// Draws sample indices mixing all stains within a batch.
#[derive(Clone, Debug)]
pub struct UnifiedSampler {
    groups: Vec<(String, Vec<usize>)>,
    balancing: Balancing,
}

impl UnifiedSampler {
    /// `groups` maps a stain name to the indices of its samples.
    pub fn new(groups: BTreeMap<String, Vec<usize>>, balancing: Balancing) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Data("no stains to sample from".into()));
        }
        if let Some((name, _)) = groups.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Data(format!("stain {name} has no samples")));
        }
        Ok(UnifiedSampler { groups: groups.into_iter().collect(), balancing })
    }

    pub fn from_samples(samples: &[PairedSample], balancing: Balancing) -> Result<Self> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            groups.entry(s.stain.clone()).or_default().push(i);
        }
        Self::new(groups, balancing)
    }

    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        let g = match self.balancing {
            Balancing::Uniform => rng.random_range(0..self.groups.len()),
            Balancing::Proportional => {
                let total: usize = self.groups.iter().map(|g| g.1.len()).sum();
                let mut r = rng.random_range(0..total);
                self.groups.iter().position(|g| {
                    if r < g.1.len() {
                        true
                    } else {
                        r -= g.1.len();
                        false
                    }
                })
                .expect("r < total")
            }
        };
        let members = &self.groups[g].1;
        members[rng.random_range(0..members.len())]
    }

    pub fn batch(&self, size: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..size).map(|_| self.draw(rng)).collect()
    }
}

/// Mixes a root seed with a stream label and index into an independent seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

/// Eosin optical-density direction.
pub const EOSIN: [f64; 3] = [0.072, 0.990, 0.105];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub side: usize,
    pub pairs_per_stain: usize,
    pub test_pairs_per_stain: usize,
    pub stains: Vec<String>,
    /// Peak DAB concentration of positive cells, one per stain.
    pub dab_levels: Vec<f64>,
    pub cells: usize,
    pub radius: [f64; 2],
    /// Range of the per-cell density factor shared by both modalities.
    pub density: [f64; 2],
    /// Standard deviation of per-pixel concentration noise.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            side: 64,
            pairs_per_stain: 2,
            test_pairs_per_stain: 1,
            stains: ["HER2", "Ki67", "ER", "PR"].map(String::from).to_vec(),
            dab_levels: vec![0.9, 0.5, 0.7, 1.1],
            cells: 24,
            radius: [2.5, 5.0],
            density: [0.75, 1.0],
            noise: 0.02,
        }
    }
}

/// One synthetic pair: blobs on eosin stroma. Each cell has a density factor and a
/// radial profile shared by both images; cells with dense hematoxylin in H&E are
/// DAB-positive in the IHC image, the rest stay hematoxylin-blue. Concentrations
/// carry independent Gaussian noise.
pub fn synthetic_pair(cfg: &SyntheticConfig, dab_level: f64, rng: &mut impl Rng) -> Result<(RgbImage, RgbImage)> {
    let side = cfg.side;
    let hdab = StainMatrix::hdab();
    let he_rows = [crate::stain::HEMATOXYLIN, EOSIN].map(|v| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v.map(|x| x / n)
    });
    let render_he = |h: f64, e: f64| -> [f64; 3] {
        std::array::from_fn(|j| 10f64.powf(-(h.max(0.0) * he_rows[0][j] + e.max(0.0) * he_rows[1][j])).min(1.0))
    };
    // (cell index, radial weight) per pixel
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; side * side];
    let mut cells = Vec::with_capacity(cfg.cells);
    let s = side as f64;
    for k in 0..cfg.cells {
        let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let r = rng.random_range(cfg.radius[0]..cfg.radius[1]);
        cells.push((rng.random_bool(0.5), rng.random_range(cfg.density[0]..=cfg.density[1])));
        for y in 0..side {
            for x in 0..side {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let d2 = (dy * dy + dx * dx) / (r * r);
                if d2 <= 1.0 {
                    owner[y * side + x] = Some((k, 1.0 - 0.4 * d2));
                }
            }
        }
    }
    // low-frequency stroma density
    let (fy, fx, ph) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.0..6.28));
    let stroma = |y: usize, x: usize| {
        let v = (fy * y as f64 * 6.28 / s + ph).sin() * (fx * x as f64 * 6.28 / s).cos();
        if v > -0.2 {
            0.35
        } else {
            0.0
        }
    };
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(format!("synthetic.noise: {e}")))?;
    let mut eps = |n: usize| -> Vec<f64> { (0..n).map(|_| noise.sample(rng)).collect() };
    let (he_noise, ihc_noise) = (eps(side * side * 2), eps(side * side * 2));
    let hne = RgbImage::from_fn(side, side, ValueRange::Unit, |y, x| {
        let i = y * side + x;
        let (n0, n1) = (he_noise[2 * i], he_noise[2 * i + 1]);
        match owner[i] {
            None => render_he(n0, stroma(y, x) + n1),
            Some((k, w)) => {
                let (positive, a) = cells[k];
                render_he(if positive { 0.9 } else { 0.45 } * a * w + n0, 0.1 + n1)
            }
        }
    })?;
    let ihc = RgbImage::from_fn(side, side, ValueRange::Unit, |y, x| {
        let i = y * side + x;
        let (n0, n1) = (ihc_noise[2 * i], ihc_noise[2 * i + 1]);
        let c = match owner[i] {
            None => [if stroma(y, x) > 0.0 { 0.08 } else { 0.0 } + n0, 0.0, n1],
            Some((k, w)) => match cells[k] {
                (true, a) => [0.15 + n0, 0.0, dab_level * a * w + n1],
                (false, a) => [0.5 * a * w + n0, 0.0, n1],
            },
        };
        hdab.render(c.map(|v| v.max(0.0))).map(|v| v.min(1.0))
    })?;
    Ok((hne, ihc))
}

/// Writes a synthetic dataset (PNG pairs plus `manifest.jsonl`) and returns the
/// manifest path.
pub fn write_synthetic_dataset(dir: &Path, cfg: &SyntheticConfig, seed: u64) -> Result<PathBuf> {
    if cfg.dab_levels.len() != cfg.stains.len() {
        return Err(Error::Config("synthetic.dab_levels needs one level per stain".into()));
    }
    let mut samples = Vec::new();
    for (si, stain) in cfg.stains.iter().enumerate() {
        for i in 0..cfg.pairs_per_stain + cfg.test_pairs_per_stain {
            let mut rng = stream_rng(seed, 0x5917, (si * 1_000_000 + i) as u64);
            let (hne, ihc) = synthetic_pair(cfg, cfg.dab_levels[si], &mut rng)?;
            let id = format!("{}_{i:03}", stain.to_lowercase());
            let (hp, ip) = (PathBuf::from(format!("hne/{id}.png")), PathBuf::from(format!("ihc/{id}.png")));
            hne.save(&dir.join(&hp))?;
            ihc.save(&dir.join(&ip))?;
            let split = if i < cfg.pairs_per_stain { Split::Train } else { Split::Test };
            samples.push(PairedSample { hne: hp, ihc: ip, stain: stain.clone(), class: None, split, source_id: id });
        }
    }
    let path = dir.join("manifest.jsonl");
    write_manifest(&path, &samples)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crops_share_coordinates_and_flips() {
        let hne = RgbImage::from_fn(16, 16, ValueRange::Unit, |y, x| [y as f64 / 16.0, x as f64 / 16.0, 0.5]).unwrap();
        let ihc = hne.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (a, b, spec) = sample_training_pair(&hne, &ihc, 8, &mut rng).unwrap();
            assert_eq!(a, b);
            assert!(spec.y <= 8 && spec.x <= 8);
            assert_eq!(a.range(), ValueRange::Signed);
        }
        assert!(sample_training_pair(&hne, &ihc, 17, &mut rng).is_err());
    }

    #[test]
    fn manifest_round_trip_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let s = PairedSample {
            hne: "a/h.png".into(),
            ihc: "a/i.png".into(),
            stain: "HER2".into(),
            class: Some("2+".into()),
            split: Split::Train,
            source_id: "x".into(),
        };
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, std::slice::from_ref(&s)).unwrap();
        let back = read_manifest(&p).unwrap();
        assert_eq!(back[0].hne, dir.path().join("a/h.png"));
        assert_eq!(back[0].token_key(), "2+");
        let vocab: Vec<String> = ["0", "1+", "2+", "3+"].map(String::from).to_vec();
        assert_eq!(back[0].token(&vocab).unwrap(), 2);
        std::fs::write(&p, "{\"hne\":1}\n").unwrap();
        assert!(read_manifest(&p).is_err());
    }

    #[test]
    fn sampler_rejects_empty_stains() {
        let mut g = BTreeMap::new();
        g.insert("A".to_string(), vec![]);
        assert!(UnifiedSampler::new(g, Balancing::Proportional).is_err());
    }

    #[test]
    fn synthetic_pairs_are_deterministic_and_positive_cells_carry_dab() {
        let cfg = SyntheticConfig { side: 32, cells: 10, noise: 0.0, ..SyntheticConfig::default() };
        let a = synthetic_pair(&cfg, 0.8, &mut stream_rng(1, 2, 3)).unwrap();
        let b = synthetic_pair(&cfg, 0.8, &mut stream_rng(1, 2, 3)).unwrap();
        assert_eq!(a, b);
        let dab = crate::stain::dab_channel(&a.1, &StainMatrix::hdab(), 1.0 / 255.0).unwrap();
        let top = dab.0.iter().copied().fold(0.0, f64::max);
        // peak is at most the level times the densest profile value
        assert!(top <= 0.8 + 1e-9);
        assert!(top > 0.8 * 0.75 * 0.6 || top == 0.0);
    }
}
