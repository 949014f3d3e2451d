//! Sobel gradients of image luminance.

use vstain_tensor::Tensor;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Horizontal (`x`) then vertical (`y`) Sobel kernels, cross-correlation form.
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Luminance `[n, 1, h, w]` of `[n, 3, h, w]` RGB.
pub fn luminance(rgb: &Tensor) -> Tensor {
    rgb.conv2d(&Tensor::from_slice(&LUMA, &[1, 3, 1, 1]), 1, 0)
}

/// `[n, 2, h, w]` horizontal and vertical responses on the luminance of `rgb`,
/// replicate-padded so the output grid equals the input grid.
pub fn sobel_gradients(rgb: &Tensor) -> Tensor {
    let k: Vec<f64> = SOBEL_X.iter().chain(SOBEL_Y.iter()).flatten().copied().collect();
    luminance(rgb).pad_replicate2d(1).conv2d(&Tensor::from_vec(k, &[2, 1, 3, 3]), 1, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_gradient() {
        let g = sobel_gradients(&Tensor::full(&[1, 3, 5, 6], 0.3));
        assert_eq!(g.shape(), &[1, 2, 5, 6]);
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn vertical_step_edge_has_only_horizontal_response() {
        let (h, w) = (6, 6);
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 3..w {
                    data[c * h * w + y * w + x] = 1.0;
                }
            }
        }
        let g = sobel_gradients(&Tensor::from_vec(data, &[1, 3, h, w]));
        let (gx, gy) = g.data().split_at(h * w);
        assert!(gy.iter().all(|v| v.abs() < 1e-12));
        assert!((gx[2 * w + 2] - 4.0).abs() < 1e-12 && (gx[2 * w + 3] - 4.0).abs() < 1e-12);
        assert_eq!(gx[2 * w], 0.0);
    }

    #[test]
    fn matches_direct_convolution_oracle() {
        let (h, w) = (5, 5);
        let lum: Vec<f64> = (0..h * w).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        // grey input so luminance equals each channel
        let rgb: Vec<f64> = (0..3).flat_map(|_| lum.iter().copied()).collect();
        let g = sobel_gradients(&Tensor::from_vec(rgb, &[1, 3, h, w]));
        let at = |y: isize, x: isize| lum[(y.clamp(0, 4) * 5 + x.clamp(0, 4)) as usize];
        for y in 0..5isize {
            for x in 0..5isize {
                let (mut ex, mut ey) = (0.0, 0.0);
                for dy in 0..3 {
                    for dx in 0..3 {
                        let v = at(y + dy as isize - 1, x + dx as isize - 1);
                        ex += SOBEL_X[dy][dx] * v;
                        ey += SOBEL_Y[dy][dx] * v;
                    }
                }
                let i = (y * 5 + x) as usize;
                assert!((g.data()[i] - ex).abs() < 1e-12);
                assert!((g.data()[25 + i] - ey).abs() < 1e-12);
            }
        }
    }
}
