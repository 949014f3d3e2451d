use std::sync::Arc;

use crate::kernels::{self, ConvGeom};
use crate::shape::{aligned_strides, broadcast_shape, for_each_offset, numel, strides};
use crate::{Op, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnaryKind {
    Exp,
    Ln,
    Sqrt,
    Tanh,
    LeakyRelu(f64),
    Abs,
    ClampMin(f64),
}

fn binary_forward(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> (Vec<f64>, Vec<usize>) {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return (data, a.shape().to_vec());
    }
    let out = broadcast_shape(a.shape(), b.shape()).unwrap_or_else(|| {
        panic!("shapes {:?} and {:?} do not broadcast", a.shape(), b.shape())
    });
    let sa = aligned_strides(a.shape(), &out);
    let sb = aligned_strides(b.shape(), &out);
    let (da, db) = (a.data(), b.data());
    let mut data = vec![0.0; numel(&out)];
    for_each_offset(&out, [&sa, &sb], |o, [ia, ib]| data[o] = f(da[ia], db[ib]));
    (data, out)
}

impl Tensor {
    fn binary(&self, rhs: &Tensor, kind: BinaryKind) -> Tensor {
        let (data, shape) = match kind {
            BinaryKind::Add => binary_forward(self, rhs, |x, y| x + y),
            BinaryKind::Sub => binary_forward(self, rhs, |x, y| x - y),
            BinaryKind::Mul => binary_forward(self, rhs, |x, y| x * y),
            BinaryKind::Div => binary_forward(self, rhs, |x, y| x / y),
        };
        Tensor::from_op(data, shape, Op::Binary(kind, self.clone(), rhs.clone()))
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, BinaryKind::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, BinaryKind::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, BinaryKind::Mul)
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, BinaryKind::Div)
    }

    /// `scale·x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Tensor {
        let data = self.data().iter().map(|&x| scale * x + shift).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Affine(self.clone(), scale))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.affine(1.0, c)
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    fn unary(&self, kind: UnaryKind) -> Tensor {
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            UnaryKind::Exp => Box::new(f64::exp),
            UnaryKind::Ln => Box::new(f64::ln),
            UnaryKind::Sqrt => Box::new(f64::sqrt),
            UnaryKind::Tanh => Box::new(f64::tanh),
            UnaryKind::LeakyRelu(s) => Box::new(move |x| if x > 0.0 { x } else { s * x }),
            UnaryKind::Abs => Box::new(f64::abs),
            UnaryKind::ClampMin(m) => Box::new(move |x: f64| x.max(m)),
        };
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Unary(kind, self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(UnaryKind::Ln)
    }

    pub fn log10(&self) -> Tensor {
        self.ln().scale(std::f64::consts::LOG10_E)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(UnaryKind::Tanh)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(UnaryKind::LeakyRelu(slope))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(UnaryKind::LeakyRelu(0.0))
    }

    pub fn abs(&self) -> Tensor {
        self.unary(UnaryKind::Abs)
    }

    /// `max(x, m)` elementwise; the gradient passes where `x > m`.
    pub fn clamp_min(&self, m: f64) -> Tensor {
        self.unary(UnaryKind::ClampMin(m))
    }

    pub fn sqr(&self) -> Tensor {
        self.mul(self)
    }

    /// Reduces by summation down to a broadcast-compatible `target` shape.
    pub fn sum_to(&self, target: &[usize]) -> Tensor {
        if self.shape() == target {
            return self.clone();
        }
        let st = aligned_strides(target, self.shape());
        let ss = strides(self.shape());
        let src = self.data();
        let mut data = vec![0.0; numel(target)];
        for_each_offset(self.shape(), [&ss, &st], |_, [i, o]| data[o] += src[i]);
        Tensor::from_op(data, target.to_vec(), Op::SumTo(self.clone()))
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Tensor {
        if self.shape() == target {
            return self.clone();
        }
        let ss = aligned_strides(self.shape(), target);
        let src = self.data();
        let mut data = vec![0.0; numel(target)];
        for_each_offset(target, [&ss], |o, [i]| data[o] = src[i]);
        Tensor::from_op(data, target.to_vec(), Op::BroadcastTo(self.clone()))
    }

    pub fn sum_all(&self) -> Tensor {
        self.sum_to(&[]).reshape(&[])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sums over `axes`, keeping them as length-1 axes.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Tensor {
        let mut target = self.shape().to_vec();
        for &a in axes {
            target[a] = 1;
        }
        self.sum_to(&target)
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Tensor {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_keepdim(axes).scale(1.0 / n.max(1) as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape(),
            shape
        );
        if self.shape() == shape {
            return self.clone();
        }
        let op = Op::Reshape(self.clone());
        if crate::is_grad_enabled() && self.requires_grad() {
            Tensor::make(self.0.data.clone(), shape.to_vec(), Some(op), true)
        } else {
            Tensor::make(self.0.data.clone(), shape.to_vec(), None, false)
        }
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let rank = self.rank();
        assert_eq!(perm.len(), rank, "permutation rank mismatch");
        let mut seen = vec![false; rank];
        for &p in perm {
            assert!(p < rank && !seen[p], "invalid permutation {perm:?}");
            seen[p] = true;
        }
        let out: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let own = strides(self.shape());
        let ps: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
        let src = self.data();
        let mut data = vec![0.0; self.numel()];
        for_each_offset(&out, [&ps], |o, [i]| data[o] = src[i]);
        Tensor::from_op(data, out, Op::Permute(self.clone(), perm.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Tensor {
        let r = self.rank();
        assert!(r >= 2);
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    /// Batched matrix product over the last two axes. Leading axes must match,
    /// or one operand must be a plain matrix that is shared across the batch.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (ra, rb) = (self.rank(), rhs.rank());
        assert!(ra >= 2 && rb >= 2, "matmul needs rank >= 2");
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (rhs.shape()[rb - 2], rhs.shape()[rb - 1]);
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape(), rhs.shape());
        let ba: usize = self.shape()[..ra - 2].iter().product();
        let bb: usize = rhs.shape()[..rb - 2].iter().product();
        let (batch, lead) = if ra == 2 {
            (bb, rhs.shape()[..rb - 2].to_vec())
        } else if rb == 2 {
            (ba, self.shape()[..ra - 2].to_vec())
        } else {
            assert_eq!(
                &self.shape()[..ra - 2],
                &rhs.shape()[..rb - 2],
                "matmul batch dims differ"
            );
            (ba, self.shape()[..ra - 2].to_vec())
        };
        let (da, db) = (self.data(), rhs.data());
        let mut data = vec![0.0; batch * m * n];
        for b in 0..batch {
            let a_off = if ra == 2 { 0 } else { b * m * k };
            let b_off = if rb == 2 { 0 } else { b * k * n };
            kernels::gemm(
                m,
                k,
                n,
                &da[a_off..a_off + m * k],
                false,
                &db[b_off..b_off + k * n],
                false,
                0.0,
                &mut data[b * m * n..(b + 1) * m * n],
            );
        }
        let mut shape = lead;
        shape.extend([m, n]);
        Tensor::from_op(data, shape, Op::Matmul(self.clone(), rhs.clone()))
    }

    /// 2-D convolution without bias. `self: [n, ci, h, w]`, `weight: [co, ci, kh, kw]`,
    /// zero padding.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, ci, h, w) = self.dims4();
        let (co, wci, kh, kw) = weight.dims4();
        assert_eq!(ci, wci, "conv2d channel mismatch: input {ci}, weight {wci}");
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than input");
        let geom = ConvGeom {
            ci,
            h,
            w,
            kh,
            kw,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        };
        let data = kernels::conv2d(self.data(), weight.data(), n, co, &geom);
        Tensor::from_op(
            data,
            vec![n, co, geom.ho, geom.wo],
            Op::Conv2d { x: self.clone(), w: weight.clone(), geom },
        )
    }

    /// Transposed convolution, the input-adjoint of [`Tensor::conv2d`].
    /// `self: [n, cin, h, w]`, `weight: [cin, cout, kh, kw]`, output side
    /// `(h - 1)·stride - 2·pad + kh + out_pad`.
    pub fn conv_transpose2d(&self, weight: &Tensor, stride: usize, pad: usize, out_pad: usize) -> Tensor {
        let (_, cin, h, w) = self.dims4();
        let (wcin, cout, kh, kw) = weight.dims4();
        assert_eq!(cin, wcin, "conv_transpose2d channel mismatch");
        let geom = ConvGeom {
            ci: cout,
            h: (h - 1) * stride + kh + out_pad - 2 * pad,
            w: (w - 1) * stride + kw + out_pad - 2 * pad,
            kh,
            kw,
            ho: h,
            wo: w,
            stride,
            pad,
        };
        Tensor::conv_transpose_geom(self, weight, geom)
    }

    pub(crate) fn conv_transpose_geom(gy: &Tensor, w: &Tensor, geom: ConvGeom) -> Tensor {
        let (n, co, _, _) = gy.dims4();
        let data = kernels::conv_transpose2d(gy.data(), w.data(), n, co, &geom);
        Tensor::from_op(
            data,
            vec![n, geom.ci, geom.h, geom.w],
            Op::ConvTranspose2d { g: gy.clone(), w: w.clone(), geom },
        )
    }

    pub(crate) fn conv_weight_grad(x: &Tensor, gy: &Tensor, geom: ConvGeom) -> Tensor {
        let (n, co, _, _) = gy.dims4();
        let data = kernels::conv_weight_grad(x.data(), gy.data(), n, co, &geom);
        Tensor::from_op(
            data,
            vec![co, geom.ci, geom.kh, geom.kw],
            Op::ConvWeightGrad { x: x.clone(), g: gy.clone(), geom },
        )
    }

    /// Sum over non-overlapping `f×f` windows of the last two axes.
    pub fn sum_pool2d(&self, f: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        assert!(f > 0 && h % f == 0 && w % f == 0, "sum_pool2d: {h}x{w} not divisible by {f}");
        if f == 1 {
            return self.clone();
        }
        let data = kernels::sum_pool(self.data(), n * c, h, w, f);
        Tensor::from_op(data, vec![n, c, h / f, w / f], Op::SumPool(self.clone(), f))
    }

    /// Area (box) downsampling by an integer factor.
    pub fn avg_pool2d(&self, f: usize) -> Tensor {
        self.sum_pool2d(f).scale(1.0 / (f * f) as f64)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest2d(&self, f: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        if f == 1 {
            return self.clone();
        }
        let data = kernels::upsample(self.data(), n * c, h, w, f);
        Tensor::from_op(data, vec![n, c, h * f, w * f], Op::Upsample(self.clone(), f))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let d = self.shape()[axis];
        assert!(start + len <= d, "narrow {start}+{len} out of range {d}");
        if start == 0 && len == d {
            return self.clone();
        }
        let data = kernels::narrow(self.data(), self.shape(), axis, start, len);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(data, shape, Op::Narrow { x: self.clone(), axis, start })
    }

    /// Embeds `self` at offset `start` along `axis` of a zero tensor of length `total`.
    pub(crate) fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Tensor {
        let d = self.shape()[axis];
        assert!(start + d <= total);
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * total * inner];
        let src = self.data();
        for o in 0..outer {
            let dst = o * total * inner + start * inner;
            data[dst..dst + d * inner].copy_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = total;
        Tensor::from_op(data, shape, Op::PadAxis { x: self.clone(), axis, start })
    }

    pub fn cat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "cat of nothing");
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let first = parts[0].shape();
        for p in parts {
            assert_eq!(p.rank(), first.len(), "cat rank mismatch");
            for (i, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
                assert!(i == axis || a == b, "cat shape mismatch {:?} vs {:?}", p.shape(), first);
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let slices: Vec<(&[f64], usize)> = parts.iter().map(|p| (p.data(), p.shape()[axis])).collect();
        let data = kernels::concat(&slices, outer, inner);
        let mut shape = first.to_vec();
        shape[axis] = slices.iter().map(|(_, d)| d).sum();
        Tensor::from_op(data, shape, Op::Cat(parts.to_vec(), axis))
    }

    /// `out[i] = self.flat[index[i]]`, shaped as `shape`.
    pub fn gather_flat(&self, index: Arc<Vec<usize>>, shape: &[usize]) -> Tensor {
        assert_eq!(index.len(), numel(shape), "gather index length vs shape");
        let src = self.data();
        let data = index.iter().map(|&i| src[i]).collect();
        Tensor::from_op(data, shape.to_vec(), Op::Gather(self.clone(), index))
    }

    /// Adjoint of [`Tensor::gather_flat`]: `out.flat[index[i]] += self.flat[i]`.
    pub fn scatter_add_flat(&self, index: Arc<Vec<usize>>, shape: &[usize]) -> Tensor {
        assert_eq!(index.len(), self.numel(), "scatter index length vs source");
        let mut data = vec![0.0; numel(shape)];
        for (&i, &v) in index.iter().zip(self.data()) {
            data[i] += v;
        }
        Tensor::from_op(data, shape.to_vec(), Op::ScatterAdd(self.clone(), index))
    }

    /// Selects rows (entries of axis 0).
    pub fn index_select0(&self, rows: &[usize]) -> Tensor {
        let row_len: usize = self.shape()[1..].iter().product();
        let index: Vec<usize> = rows
            .iter()
            .flat_map(|&r| {
                assert!(r < self.shape()[0], "row {r} out of range");
                r * row_len..(r + 1) * row_len
            })
            .collect();
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        self.gather_flat(Arc::new(index), &shape)
    }

    /// Replicate ("edge") padding of the last two axes.
    pub fn pad_replicate2d(&self, pad: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let mut index = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            for oy in 0..ho {
                let iy = oy.saturating_sub(pad).min(h - 1);
                for ox in 0..wo {
                    let ix = ox.saturating_sub(pad).min(w - 1);
                    index.push(p * h * w + iy * w + ix);
                }
            }
        }
        self.gather_flat(Arc::new(index), &[n, c, ho, wo])
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let r = self.rank();
        let last = self.shape()[r - 1];
        let rows = self.numel() / last.max(1);
        let mut max = Vec::with_capacity(rows);
        for row in self.data().chunks(last) {
            max.push(row.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        let mut mshape = self.shape().to_vec();
        mshape[r - 1] = 1;
        let shifted = self.sub(&Tensor::from_vec(max, &mshape));
        let e = shifted.exp();
        let s = e.sum_keepdim(&[r - 1]);
        e.div(&s)
    }
}

impl std::ops::Add for &Tensor {
    type Output = Tensor;
    fn add(self, rhs: &Tensor) -> Tensor {
        Tensor::add(self, rhs)
    }
}

impl std::ops::Sub for &Tensor {
    type Output = Tensor;
    fn sub(self, rhs: &Tensor) -> Tensor {
        Tensor::sub(self, rhs)
    }
}

impl std::ops::Mul for &Tensor {
    type Output = Tensor;
    fn mul(self, rhs: &Tensor) -> Tensor {
        Tensor::mul(self, rhs)
    }
}
