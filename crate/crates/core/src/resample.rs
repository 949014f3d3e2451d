//! Separable resampling expressed as dense 1-D weight matrices, so the same
//! filter serves plain images and differentiable tensors (two matmuls).

use serde::{Deserialize, Serialize};
use vstain_tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Filter {
    /// Box average over the exact footprint of each output pixel.
    Area,
    /// Half-pixel-centred linear interpolation without antialiasing.
    Bilinear,
    /// Keys cubic convolution (a = -0.75), edge-clamped.
    Bicubic,
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Row-major `out_len × in_len` matrix mapping a signal to its resampled version.
pub fn resize_matrix(in_len: usize, out_len: usize, filter: Filter) -> Vec<f64> {
    assert!(in_len > 0 && out_len > 0);
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let row = &mut m[o * in_len..(o + 1) * in_len];
        match filter {
            Filter::Area => {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < in_len {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    row[i] += overlap / scale;
                    i += 1;
                }
            }
            Filter::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let t = src - i0 as f64;
                row[i0] += 1.0 - t;
                row[i1] += t;
            }
            Filter::Bicubic => {
                let src = (o as f64 + 0.5) * scale - 0.5;
                let base = src.floor() as isize;
                let t = src - base as f64;
                for k in -1..=2isize {
                    let idx = (base + k).clamp(0, in_len as isize - 1) as usize;
                    row[idx] += cubic(t - k as f64);
                }
            }
        }
    }
    m
}

/// Resizes the last two axes of an `[n, c, h, w]` tensor.
pub fn resize_tensor(x: &Tensor, out_h: usize, out_w: usize, filter: Filter) -> Tensor {
    let (_, _, h, w) = x.dims4();
    if h == out_h && w == out_w {
        return x.clone();
    }
    if filter == Filter::Area && h % out_h == 0 && w % out_w == 0 && h / out_h == w / out_w {
        return x.avg_pool2d(h / out_h);
    }
    // rows: [out_h, h] · x ; cols: x · [w, out_w]
    let mw = Tensor::from_vec(resize_matrix(w, out_w, filter), &[out_w, w]).t();
    let mh = Tensor::from_vec(resize_matrix(h, out_h, filter), &[out_h, h]);
    mh.matmul(&x.matmul(&mw))
}

/// Resizes a row-major `h × w` plane.
pub fn resize_plane(plane: &[f64], h: usize, w: usize, out_h: usize, out_w: usize, filter: Filter) -> Vec<f64> {
    let mh = resize_matrix(h, out_h, filter);
    let mw = resize_matrix(w, out_w, filter);
    let mut tmp = vec![0.0; h * out_w];
    for y in 0..h {
        for ox in 0..out_w {
            let row = &mw[ox * w..(ox + 1) * w];
            tmp[y * out_w + ox] = row.iter().zip(&plane[y * w..(y + 1) * w]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let row = &mh[oy * h..(oy + 1) * h];
        for ox in 0..out_w {
            out[oy * out_w + ox] = (0..h).map(|y| row[y] * tmp[y * out_w + ox]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one() {
        for filter in [Filter::Area, Filter::Bilinear, Filter::Bicubic] {
            for (i, o) in [(8, 4), (8, 3), (4, 8), (5, 5)] {
                let m = resize_matrix(i, o, filter);
                for r in m.chunks(i) {
                    assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{filter:?} {i}->{o}");
                }
            }
        }
    }

    #[test]
    fn factor_two_bilinear_equals_area() {
        assert_eq!(resize_matrix(8, 4, Filter::Bilinear), resize_matrix(8, 4, Filter::Area));
    }

    #[test]
    fn tensor_and_plane_paths_agree() {
        let plane: Vec<f64> = (0..36).map(|v| (v as f64 * 0.37).sin()).collect();
        let t = Tensor::from_vec(plane.clone(), &[1, 1, 6, 6]);
        for filter in [Filter::Area, Filter::Bilinear, Filter::Bicubic] {
            let a = resize_tensor(&t, 4, 3, filter).to_vec();
            let b = resize_plane(&plane, 6, 6, 4, 3, filter);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
