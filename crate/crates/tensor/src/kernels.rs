//! Raw numeric kernels on row-major buffers. No graph bookkeeping here.

/// `c = a·b + beta·c` for row-major `a: m×k`, `b: k×n`, `c: m×n`, with optional
/// transposition of the stored operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    pub fn out_px(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (h, w, ho, wo) = (g.h as isize, g.w as isize, g.ho, g.wo);
    let (s, p) = (g.stride as isize, g.pad as isize);
    for ci in 0..g.ci {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ki as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kj as isize;
                        *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (h, w, ho, wo) = (g.h as isize, g.w as isize, g.ho, g.wo);
    let (s, p) = (g.stride as isize, g.pad as isize);
    for ci in 0..g.ci {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ki as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = ox as isize * s - p + kj as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y[n] = W · im2col(x[n])`; `w` is `co × (ci·kh·kw)`.
pub(crate) fn conv2d(x: &[f64], w: &[f64], n: usize, co: usize, g: &ConvGeom) -> Vec<f64> {
    let (k, px) = (g.k(), g.out_px());
    let in_len = g.ci * g.h * g.w;
    let mut y = vec![0.0; n * co * px];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * px] };
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let yb = &mut y[b * co * px..(b + 1) * co * px];
        if g.is_pointwise() {
            gemm(co, k, px, w, false, xb, false, 0.0, yb);
        } else {
            im2col(xb, g, &mut cols);
            gemm(co, k, px, w, false, &cols, false, 0.0, yb);
        }
    }
    y
}

/// Adjoint of [`conv2d`] in its input: `x[n] = col2im(Wᵀ · g[n])`.
pub(crate) fn conv_transpose2d(gy: &[f64], w: &[f64], n: usize, co: usize, g: &ConvGeom) -> Vec<f64> {
    let (k, px) = (g.k(), g.out_px());
    let in_len = g.ci * g.h * g.w;
    let mut x = vec![0.0; n * in_len];
    let mut cols = vec![0.0; k * px];
    for b in 0..n {
        let gb = &gy[b * co * px..(b + 1) * co * px];
        let xb = &mut x[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            gemm(k, co, px, w, true, gb, false, 0.0, xb);
        } else {
            gemm(k, co, px, w, true, gb, false, 0.0, &mut cols);
            col2im(&cols, g, xb);
        }
    }
    x
}

/// Adjoint of [`conv2d`] in its weight: `dW = Σ_n g[n] · im2col(x[n])ᵀ`.
pub(crate) fn conv_weight_grad(x: &[f64], gy: &[f64], n: usize, co: usize, g: &ConvGeom) -> Vec<f64> {
    let (k, px) = (g.k(), g.out_px());
    let in_len = g.ci * g.h * g.w;
    let mut dw = vec![0.0; co * k];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * px] };
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let gb = &gy[b * co * px..(b + 1) * co * px];
        if g.is_pointwise() {
            gemm(co, px, k, gb, false, xb, true, 1.0, &mut dw);
        } else {
            im2col(xb, g, &mut cols);
            gemm(co, px, k, gb, false, &cols, true, 1.0, &mut dw);
        }
    }
    dw
}

/// Sums non-overlapping `f×f` blocks of each plane.
pub(crate) fn sum_pool(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h / f, w / f);
    let mut y = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for iy in 0..h {
            let row = &src[iy * w..(iy + 1) * w];
            let drow = &mut dst[(iy / f) * wo..(iy / f + 1) * wo];
            for (ix, v) in row.iter().enumerate() {
                drow[ix / f] += v;
            }
        }
    }
    y
}

/// Nearest-neighbour upsampling by an integer factor.
pub(crate) fn upsample(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut y = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let srow = &src[(oy / f) * w..(oy / f + 1) * w];
            for (ox, v) in dst[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                *v = srow[ox / f];
            }
        }
    }
    y
}

/// Copies `len` entries along `axis` starting at `start`.
pub(crate) fn narrow(x: &[f64], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let d = shape[axis];
    let mut y = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * d * inner + start * inner;
        y.extend_from_slice(&x[base..base + len * inner]);
    }
    y
}

/// Concatenates blocks along `axis`; `parts` carries each operand's data and axis length.
pub(crate) fn concat(parts: &[(&[f64], usize)], outer: usize, inner: usize) -> Vec<f64> {
    let total: usize = parts.iter().map(|(_, d)| d).sum();
    let mut y = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (data, d) in parts {
            y.extend_from_slice(&data[o * d * inner..(o + 1) * d * inner]);
        }
    }
    y
}
