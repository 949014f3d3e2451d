//! RGB images as dense `H×W×3` arrays of reals tagged with their value range.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vstain_tensor::Tensor;

use crate::error::{Error, Result};
use crate::resample::{self, Filter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    /// `[0, 1]`, used for files and stain measurements.
    Unit,
    /// `[-1, 1]`, the model space.
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
    range: ValueRange,
}

impl RgbImage {
    /// Interleaved `H×W×3` data; every value must be finite and inside `range`.
    pub fn new(height: usize, width: usize, data: Vec<f64>, range: ValueRange) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        let (lo, hi) = range.bounds();
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < lo || **v > hi) {
            return Err(Error::Data(format!("pixel value {v} outside {range:?} range")));
        }
        Ok(RgbImage { height, width, data, range })
    }

    pub fn from_fn(height: usize, width: usize, range: ValueRange, f: impl Fn(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x));
            }
        }
        Self::new(height, width, data, range)
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3], range: ValueRange) -> Result<Self> {
        Self::from_fn(height, width, range, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    fn map_range(&self, range: ValueRange, f: impl Fn(f64) -> f64) -> RgbImage {
        let (lo, hi) = range.bounds();
        RgbImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v).clamp(lo, hi)).collect(),
            range,
        }
    }

    pub fn to_unit(&self) -> RgbImage {
        match self.range {
            ValueRange::Unit => self.clone(),
            ValueRange::Signed => self.map_range(ValueRange::Unit, |v| (v + 1.0) * 0.5),
        }
    }

    pub fn to_signed(&self) -> RgbImage {
        match self.range {
            ValueRange::Signed => self.clone(),
            ValueRange::Unit => self.map_range(ValueRange::Signed, |v| v * 2.0 - 1.0),
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<RgbImage> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(RgbImage { height: h, width: w, data, range: self.range })
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let (src, dst) = ((y * self.width + x) * 3, (y * self.width + self.width - 1 - x) * 3);
                out.data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }

    /// Mirror top-bottom.
    pub fn flip_vertical(&self) -> RgbImage {
        let mut out = self.clone();
        let row = self.width * 3;
        for y in 0..self.height {
            let dst = (self.height - 1 - y) * row;
            out.data[dst..dst + row].copy_from_slice(&self.data[y * row..(y + 1) * row]);
        }
        out
    }

    /// Writes `other` with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, other: &RgbImage, y0: usize, x0: usize) -> Result<()> {
        if y0 + other.height > self.height || x0 + other.width > self.width {
            return Err(Error::Shape("paste out of bounds".into()));
        }
        let src = other.with_range(self.range);
        for y in 0..other.height {
            let d = ((y0 + y) * self.width + x0) * 3;
            self.data[d..d + other.width * 3].copy_from_slice(&src.data[y * other.width * 3..(y + 1) * other.width * 3]);
        }
        Ok(())
    }

    pub fn with_range(&self, range: ValueRange) -> RgbImage {
        match range {
            ValueRange::Unit => self.to_unit(),
            ValueRange::Signed => self.to_signed(),
        }
    }

    pub fn resize(&self, h: usize, w: usize, filter: Filter) -> RgbImage {
        if h == self.height && w == self.width {
            return self.clone();
        }
        let planes: Vec<Vec<f64>> = (0..3)
            .map(|c| resample::resize_plane(&self.channel(c), self.height, self.width, h, w, filter))
            .collect();
        let (lo, hi) = self.range.bounds();
        let mut data = Vec::with_capacity(h * w * 3);
        for i in 0..h * w {
            for p in &planes {
                data.push(p[i].clamp(lo, hi));
            }
        }
        RgbImage { height: h, width: w, data, range: self.range }
    }

    /// `[1, 3, H, W]` tensor of the raw values.
    pub fn to_tensor(&self) -> Tensor {
        Self::batch_to_tensor(std::slice::from_ref(self))
    }

    /// Stacks same-sized images into `[N, 3, H, W]`.
    pub fn batch_to_tensor(images: &[RgbImage]) -> Tensor {
        let (h, w) = (images[0].height, images[0].width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            assert_eq!((img.height, img.width), (h, w), "batch images differ in size");
            for c in 0..3 {
                data.extend(img.data.iter().skip(c).step_by(3));
            }
        }
        Tensor::from_vec(data, &[images.len(), 3, h, w])
    }

    /// Reads sample `index` of an `[N, 3, H, W]` tensor, clamping into `range`.
    pub fn from_tensor(t: &Tensor, index: usize, range: ValueRange) -> Result<RgbImage> {
        let (n, c, h, w) = t.dims4();
        if c != 3 || index >= n {
            return Err(Error::Shape(format!("cannot read image {index} from tensor {:?}", t.shape())));
        }
        let src = &t.data()[index * 3 * h * w..(index + 1) * 3 * h * w];
        let (lo, hi) = range.bounds();
        let mut data = Vec::with_capacity(3 * h * w);
        for i in 0..h * w {
            for ch in 0..3 {
                let v = src[ch * h * w + i];
                if !v.is_finite() {
                    return Err(Error::Numeric("non-finite pixel in generated image".into()));
                }
                data.push(v.clamp(lo, hi));
            }
        }
        Ok(RgbImage { height: h, width: w, data, range })
    }

    pub fn load(path: &Path) -> Result<RgbImage> {
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        RgbImage::new(h as usize, w as usize, data, ValueRange::Unit)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let unit = self.to_unit();
        let raw: Vec<u8> = unit.data.iter().map(|&v| (v * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches")
    }

    /// Saves losslessly (PNG) after 8-bit quantization.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    pub fn mean_intensity(&self) -> f64 {
        let unit = self.to_unit();
        unit.data.iter().sum::<f64>() / unit.data.len() as f64
    }
}
