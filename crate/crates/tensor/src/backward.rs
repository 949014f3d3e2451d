use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::kernels::ConvGeom;
use crate::ops::{BinaryKind, UnaryKind};
use crate::{GradModeGuard, Tensor};

pub(crate) enum Op {
    Binary(BinaryKind, Tensor, Tensor),
    Affine(Tensor, f64),
    Unary(UnaryKind, Tensor),
    SumTo(Tensor),
    BroadcastTo(Tensor),
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    Matmul(Tensor, Tensor),
    Conv2d { x: Tensor, w: Tensor, geom: ConvGeom },
    ConvTranspose2d { g: Tensor, w: Tensor, geom: ConvGeom },
    ConvWeightGrad { x: Tensor, g: Tensor, geom: ConvGeom },
    SumPool(Tensor, usize),
    Upsample(Tensor, usize),
    Narrow { x: Tensor, axis: usize, start: usize },
    PadAxis { x: Tensor, axis: usize, start: usize },
    Cat(Vec<Tensor>, usize),
    Gather(Tensor, Arc<Vec<usize>>),
    ScatterAdd(Tensor, Arc<Vec<usize>>),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Binary(_, a, b) | Op::Matmul(a, b) => vec![a, b],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::ConvTranspose2d { g, w, .. } => vec![g, w],
            Op::ConvWeightGrad { x, g, .. } => vec![x, g],
            Op::Affine(x, _)
            | Op::Unary(_, x)
            | Op::SumTo(x)
            | Op::BroadcastTo(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::SumPool(x, _)
            | Op::Upsample(x, _)
            | Op::Narrow { x, .. }
            | Op::PadAxis { x, .. }
            | Op::Gather(x, _)
            | Op::ScatterAdd(x, _) => vec![x],
            Op::Cat(parts, _) => parts.iter().collect(),
        }
    }

    /// Gradients of the inputs given the gradient `g` of `out`. Inputs that do not
    /// require gradients are skipped.
    fn backward(&self, out: &Tensor, g: &Tensor) -> Vec<(Tensor, Tensor)> {
        let mut res = Vec::new();
        let mut push = |t: &Tensor, f: &dyn Fn() -> Tensor| {
            if t.requires_grad() {
                res.push((t.clone(), f()));
            }
        };
        match self {
            Op::Binary(kind, a, b) => match kind {
                BinaryKind::Add => {
                    push(a, &|| g.sum_to(a.shape()));
                    push(b, &|| g.sum_to(b.shape()));
                }
                BinaryKind::Sub => {
                    push(a, &|| g.sum_to(a.shape()));
                    push(b, &|| g.neg().sum_to(b.shape()));
                }
                BinaryKind::Mul => {
                    push(a, &|| g.mul(b).sum_to(a.shape()));
                    push(b, &|| g.mul(a).sum_to(b.shape()));
                }
                BinaryKind::Div => {
                    push(a, &|| g.div(b).sum_to(a.shape()));
                    push(b, &|| g.mul(a).div(&b.sqr()).neg().sum_to(b.shape()));
                }
            },
            Op::Affine(x, s) => push(x, &|| g.scale(*s)),
            Op::Unary(kind, x) => match *kind {
                UnaryKind::Exp => push(x, &|| g.mul(out)),
                UnaryKind::Ln => push(x, &|| g.div(x)),
                UnaryKind::Sqrt => push(x, &|| g.div(out).scale(0.5)),
                UnaryKind::Tanh => push(x, &|| g.mul(&out.sqr().affine(-1.0, 1.0))),
                UnaryKind::LeakyRelu(s) => push(x, &|| g.mul(&mask(x, |v| if v > 0.0 { 1.0 } else { s }))),
                UnaryKind::Abs => push(x, &|| g.mul(&mask(x, |v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }))),
                UnaryKind::ClampMin(m) => push(x, &|| g.mul(&mask(x, |v| if v > m { 1.0 } else { 0.0 }))),
            },
            Op::SumTo(x) => push(x, &|| g.broadcast_to(x.shape())),
            Op::BroadcastTo(x) => push(x, &|| g.sum_to(x.shape())),
            Op::Reshape(x) => push(x, &|| g.reshape(x.shape())),
            Op::Permute(x, perm) => push(x, &|| {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                g.permute(&inv)
            }),
            Op::Matmul(a, b) => {
                push(a, &|| g.matmul(&b.t()).sum_to(a.shape()));
                push(b, &|| a.t().matmul(g).sum_to(b.shape()));
            }
            Op::Conv2d { x, w, geom } => {
                push(x, &|| Tensor::conv_transpose_geom(g, w, *geom));
                push(w, &|| Tensor::conv_weight_grad(x, g, *geom));
            }
            Op::ConvTranspose2d { g: gy, w, geom } => {
                push(gy, &|| g.conv2d(w, geom.stride, geom.pad));
                push(w, &|| Tensor::conv_weight_grad(g, gy, *geom));
            }
            Op::ConvWeightGrad { x, g: gy, geom } => {
                push(x, &|| Tensor::conv_transpose_geom(gy, g, *geom));
                push(gy, &|| x.conv2d(g, geom.stride, geom.pad));
            }
            Op::SumPool(x, f) => push(x, &|| g.upsample_nearest2d(*f)),
            Op::Upsample(x, f) => push(x, &|| g.sum_pool2d(*f)),
            Op::Narrow { x, axis, start } => push(x, &|| g.pad_axis(*axis, *start, x.shape()[*axis])),
            Op::PadAxis { x, axis, start } => push(x, &|| g.narrow(*axis, *start, x.shape()[*axis])),
            Op::Cat(parts, axis) => {
                let mut offset = 0;
                for p in parts {
                    let len = p.shape()[*axis];
                    push(p, &|| g.narrow(*axis, offset, len));
                    offset += len;
                }
            }
            Op::Gather(x, idx) => push(x, &|| g.scatter_add_flat(idx.clone(), x.shape())),
            Op::ScatterAdd(x, idx) => push(x, &|| g.gather_flat(idx.clone(), x.shape())),
        }
        res
    }
}

/// A constant tensor of `f` applied to `x`; the derivative of a piecewise-linear map.
fn mask(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(x.data().iter().map(|&v| f(v)).collect(), x.shape())
}

/// Gradients of a scalar with respect to the leaves it depends on.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.id())
    }

    pub fn remove(&mut self, t: &Tensor) -> Option<Tensor> {
        self.map.remove(&t.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, children expanded?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = &node.0.op {
            for inp in op.inputs() {
                if inp.requires_grad() && !visited.contains(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            }
        }
    }
    order
}

fn run_backward(root: &Tensor, create_graph: bool) -> Gradients {
    let mut grads: HashMap<usize, Tensor> = HashMap::new();
    let mut leaves = Gradients::default();
    if !root.requires_grad() {
        return leaves;
    }
    let _mode = GradModeGuard::set(create_graph);
    grads.insert(root.id(), root.ones_like());
    for node in topo_order(root).iter().rev() {
        let Some(g) = grads.remove(&node.id()) else { continue };
        match &node.0.op {
            None => {
                leaves.map.insert(node.id(), g);
            }
            Some(op) => {
                for (inp, gi) in op.backward(node, &g) {
                    let acc = match grads.remove(&inp.id()) {
                        Some(prev) => prev.add(&gi),
                        None => gi,
                    };
                    grads.insert(inp.id(), acc);
                }
            }
        }
    }
    leaves
}

impl Tensor {
    /// Reverse-mode gradients of `self` (seeded with ones) with respect to every
    /// gradient-requiring leaf. The returned gradients are constants.
    pub fn backward(&self) -> Gradients {
        run_backward(self, false)
    }

    /// Like [`Tensor::backward`], but the gradients stay in the graph so they can be
    /// differentiated again.
    pub fn backward_with_graph(&self) -> Gradients {
        run_backward(self, true)
    }
}
