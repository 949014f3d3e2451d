//! Frozen feature backbones and dense token extraction over a 4×4 sub-crop grid.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vstain_tensor::{no_grad, Tensor};

use crate::error::{Error, Result};
use crate::image::{RgbImage, ValueRange};
use crate::resample::Filter;

/// Sub-crops per image side.
pub const SUBCROPS: usize = 4;

/// `G×G` grid of `d`-dimensional tokens, row-major `(G, G, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialTokenGrid {
    pub side: usize,
    pub dim: usize,
    /// Image pixels covered by one token side.
    pub source_resolution: usize,
    pub data: Vec<f64>,
}

impl SpatialTokenGrid {
    pub fn new(side: usize, dim: usize, source_resolution: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side * dim {
            return Err(Error::Shape(format!("token grid {side}x{side}x{dim} needs {} values", side * side * dim)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite token".into()));
        }
        Ok(SpatialTokenGrid { side, dim, source_resolution, data })
    }

    pub fn token(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.side + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    /// Channel-first `[1, d, G, G]`.
    pub fn to_tensor(&self) -> Tensor {
        Self::batch_to_tensor(std::slice::from_ref(self))
    }

    pub fn batch_to_tensor(grids: &[SpatialTokenGrid]) -> Tensor {
        let (g, d) = (grids[0].side, grids[0].dim);
        let mut out = Vec::with_capacity(grids.len() * g * g * d);
        for grid in grids {
            assert_eq!((grid.side, grid.dim), (g, d), "token grids differ in shape");
            for c in 0..d {
                out.extend(grid.data.iter().skip(c).step_by(d));
            }
        }
        Tensor::from_vec(out, &[grids.len(), d, g, g])
    }
}

/// A frozen image encoder. Implementations must be deterministic and never expose
/// trainable state.
pub trait Backbone: Send + Sync {
    /// Stable identifier written into feature caches.
    fn id(&self) -> String;
    fn token_dim(&self) -> usize;
    /// Input side the encoder expects.
    fn native_side(&self) -> usize;
    /// Tokens per side produced for one native-side input.
    fn grid_side(&self) -> usize;
    /// Patch tokens of a native-side image.
    fn patch_tokens(&self, img: &RgbImage) -> Result<SpatialTokenGrid>;
    /// Global summary vector of an image of any size.
    fn cls_embedding(&self, img: &RgbImage) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyBackboneConfig {
    pub token_dim: usize,
    pub native_side: usize,
    pub patch: usize,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        ToyBackboneConfig { token_dim: 1024, native_side: 224, patch: 16 }
    }
}

/// Seeded random patch projection followed by `tanh` and 3×3 local averaging.
#[derive(Clone, Debug)]
pub struct ToyBackbone {
    seed: u64,
    cfg: ToyBackboneConfig,
    weight: Tensor,
    bias: Tensor,
}

impl ToyBackbone {
    pub fn new(seed: u64, cfg: ToyBackboneConfig) -> Result<Self> {
        if cfg.patch == 0 || cfg.native_side % cfg.patch != 0 || cfg.token_dim == 0 {
            return Err(Error::Config(format!(
                "toy backbone: native side {} must be a positive multiple of patch {}",
                cfg.native_side, cfg.patch
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7b5e_ed0f_0bac_cb0e);
        let fan_in = 3 * cfg.patch * cfg.patch;
        let bound = (3.0 / fan_in as f64).sqrt() * 2.0;
        let w: Vec<f64> = (0..cfg.token_dim * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
        let b: Vec<f64> = (0..cfg.token_dim).map(|_| rng.random_range(-0.5..0.5)).collect();
        Ok(ToyBackbone {
            seed,
            weight: Tensor::from_vec(w, &[cfg.token_dim, 3, cfg.patch, cfg.patch]),
            bias: Tensor::from_vec(b, &[1, cfg.token_dim, 1, 1]),
            cfg,
        })
    }

    fn features(&self, img: &RgbImage) -> Tensor {
        no_grad(|| {
            let x = img.with_range(ValueRange::Signed).to_tensor();
            let t = x.conv2d(&self.weight, self.cfg.patch, 0).add(&self.bias).tanh();
            let d = self.cfg.token_dim;
            let box3 = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
            // depthwise 3×3 mean: fold channels into the batch axis
            let (_, _, h, w) = t.dims4();
            t.reshape(&[d, 1, h, w]).pad_replicate2d(1).conv2d(&box3, 1, 0).reshape(&[1, d, h, w])
        })
    }
}

impl Backbone for ToyBackbone {
    fn id(&self) -> String {
        format!("toy-{}-d{}-n{}-p{}", self.seed, self.cfg.token_dim, self.cfg.native_side, self.cfg.patch)
    }

    fn token_dim(&self) -> usize {
        self.cfg.token_dim
    }

    fn native_side(&self) -> usize {
        self.cfg.native_side
    }

    fn grid_side(&self) -> usize {
        self.cfg.native_side / self.cfg.patch
    }

    fn patch_tokens(&self, img: &RgbImage) -> Result<SpatialTokenGrid> {
        if img.height() != self.cfg.native_side || img.width() != self.cfg.native_side {
            return Err(Error::Shape(format!(
                "backbone expects {0}x{0} input, got {1}x{2}",
                self.cfg.native_side,
                img.height(),
                img.width()
            )));
        }
        let f = self.features(img);
        let (_, d, g, _) = f.dims4();
        let mut data = vec![0.0; g * g * d];
        for c in 0..d {
            for i in 0..g * g {
                data[i * d + c] = f.data()[c * g * g + i];
            }
        }
        SpatialTokenGrid::new(g, d, self.cfg.patch, data)
    }

    fn cls_embedding(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let img = img.resize(self.cfg.native_side, self.cfg.native_side, Filter::Bicubic);
        let f = self.features(&img);
        Ok(f.mean_keepdim(&[2, 3]).to_vec())
    }
}

/// Adaptive average pooling of `n` positions to `m` bins with windows
/// `[floor(i·n/m), ceil((i+1)·n/m))`.
pub fn adaptive_windows(n: usize, m: usize) -> Vec<(usize, usize)> {
    (0..m).map(|i| (i * n / m, ((i + 1) * n).div_ceil(m))).collect()
}

/// Splits the image into a 4×4 grid of sub-crops (row-major), encodes each at the
/// backbone's native side, reassembles the per-crop grids and average-pools the
/// result to `out_side × out_side`. Values are rounded to `f32` precision so cached
/// and fresh grids agree exactly.
pub fn extract_subcrop_tokens(img: &RgbImage, backbone: &dyn Backbone, out_side: usize) -> Result<SpatialTokenGrid> {
    let (h, w) = (img.height(), img.width());
    if h != w || h % SUBCROPS != 0 {
        return Err(Error::Shape(format!("image {h}x{w} must be square with side divisible by {SUBCROPS}")));
    }
    let crop = h / SUBCROPS;
    let (g, d, native) = (backbone.grid_side(), backbone.token_dim(), backbone.native_side());
    let full = g * SUBCROPS;
    let mut assembled = vec![0.0; full * full * d];
    for cy in 0..SUBCROPS {
        for cx in 0..SUBCROPS {
            let sub = img.crop(cy * crop, cx * crop, crop, crop)?.resize(native, native, Filter::Bicubic);
            let tokens = backbone.patch_tokens(&sub)?;
            if tokens.side != g || tokens.dim != d {
                return Err(Error::Shape(format!(
                    "backbone produced {}x{}x{}, declared {g}x{g}x{d}",
                    tokens.side, tokens.side, tokens.dim
                )));
            }
            for ty in 0..g {
                for tx in 0..g {
                    let dst = ((cy * g + ty) * full + cx * g + tx) * d;
                    assembled[dst..dst + d].copy_from_slice(tokens.token(ty, tx));
                }
            }
        }
    }
    let windows = adaptive_windows(full, out_side);
    let mut out = vec![0.0; out_side * out_side * d];
    for (oy, &(y0, y1)) in windows.iter().enumerate() {
        for (ox, &(x0, x1)) in windows.iter().enumerate() {
            let dst = &mut out[(oy * out_side + ox) * d..(oy * out_side + ox + 1) * d];
            for y in y0..y1 {
                for x in x0..x1 {
                    let src = &assembled[(y * full + x) * d..(y * full + x + 1) * d];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            dst.iter_mut().for_each(|v| *v = (*v / count) as f32 as f64);
        }
    }
    SpatialTokenGrid::new(out_side, d, h / out_side, out)
}

const CACHE_MAGIC: &[u8; 4] = b"VSTK";
const CACHE_VERSION: u32 = 1;

/// One cache record: magic, version, id, `G`, `d`, then `G·G·d` little-endian `f32`.
pub fn write_token_cache(path: &Path, image_id: &str, grid: &SpatialTokenGrid) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::with_capacity(24 + image_id.len() + grid.data.len() * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(image_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(image_id.as_bytes());
    buf.extend_from_slice(&(grid.side as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.source_resolution as u32).to_le_bytes());
    for &v in &grid.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

/// Returns `(image_id, grid)`.
pub fn read_token_cache(path: &Path) -> Result<(String, SpatialTokenGrid)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Data(format!("token cache {}: {m}", path.display()));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = buf.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    let version = u32_at(take(4)?);
    if version != CACHE_VERSION as usize {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let id_len = u32_at(take(4)?);
    let id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("id is not utf-8"))?;
    let (side, dim, res) = (u32_at(take(4)?), u32_at(take(4)?), u32_at(take(4)?));
    let raw = take(side * side * dim * 4)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    if pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((id, SpatialTokenGrid::new(side, dim, res, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct CropIndexBackbone {
        counter: std::sync::atomic::AtomicUsize,
    }

    impl Backbone for CropIndexBackbone {
        fn id(&self) -> String {
            "index".into()
        }
        fn token_dim(&self) -> usize {
            2
        }
        fn native_side(&self) -> usize {
            8
        }
        fn grid_side(&self) -> usize {
            2
        }
        fn patch_tokens(&self, _: &RgbImage) -> Result<SpatialTokenGrid> {
            let k = self.counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst) as f64;
            SpatialTokenGrid::new(2, 2, 4, vec![k; 8])
        }
        fn cls_embedding(&self, _: &RgbImage) -> Result<Vec<f64>> {
            Ok(vec![0.0; 2])
        }
    }

    #[test]
    fn crops_are_reassembled_in_row_major_order() {
        let bb = CropIndexBackbone { counter: Default::default() };
        let img = RgbImage::constant(16, 16, [0.5; 3], ValueRange::Unit).unwrap();
        let grid = extract_subcrop_tokens(&img, &bb, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let k = (y / 2 * 4 + x / 2) as f64;
                assert_eq!(grid.token(y, x), &[k, k]);
            }
        }
        // pooled to 4×4 every token still sits inside one crop block
        let bb = CropIndexBackbone { counter: Default::default() };
        let grid = extract_subcrop_tokens(&img, &bb, 4).unwrap();
        assert_eq!(grid.token(2, 1), &[9.0, 9.0]);
    }

    #[test]
    fn rejects_indivisible_sides() {
        let bb = ToyBackbone::new(0, ToyBackboneConfig { token_dim: 4, native_side: 8, patch: 4 }).unwrap();
        let img = RgbImage::constant(18, 18, [0.5; 3], ValueRange::Unit).unwrap();
        assert!(extract_subcrop_tokens(&img, &bb, 4).is_err());
    }

    #[test]
    fn adaptive_windows_cover_input() {
        let w = adaptive_windows(56, 32);
        assert_eq!(w[0], (0, 2));
        assert_eq!(w[31], (54, 56));
        assert!(w.windows(2).all(|p| p[1].0 <= p[0].1));
        assert_eq!(adaptive_windows(8, 4), vec![(0, 2), (2, 4), (4, 6), (6, 8)]);
    }

    #[test]
    fn cache_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let grid = SpatialTokenGrid::new(2, 3, 4, (0..12).map(|v| (v as f32 * 0.1) as f64).collect()).unwrap();
        let p = dir.path().join("a.tok");
        write_token_cache(&p, "img-1", &grid).unwrap();
        let (id, back) = read_token_cache(&p).unwrap();
        assert_eq!(id, "img-1");
        assert_eq!(back, grid);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_token_cache(&p).is_err());
    }
}
