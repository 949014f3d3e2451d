//! A compact reverse-mode automatic differentiation engine over dense `f64` tensors.
//!
//! Tensors are immutable, reference-counted values. An operation on tensors that
//! require gradients records itself in the result, forming a graph that
//! [`Tensor::backward`] walks in reverse topological order.
//!
//! Every backward rule is expressed with the same differentiable operations, so a
//! gradient computed with [`Tensor::backward_with_graph`] is itself part of the graph
//! and can be differentiated again. Gradient penalties on input gradients rely on this.
//!
//! Shape errors are programming errors and panic, in the spirit of `ndarray`.

mod backward;
mod kernels;
mod ops;
mod shape;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

pub use backward::Gradients;
pub(crate) use backward::Op;
pub use shape::{broadcast_shape, numel};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Restores the previous grad mode on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl GradModeGuard {
    pub fn set(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
        GradModeGuard { prev }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` without recording any operations.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = GradModeGuard::set(false);
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    op: Option<Op>,
    requires_grad: bool,
}

#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

impl Tensor {
    fn make(data: Arc<Vec<f64>>, shape: Vec<usize>, op: Option<Op>, requires_grad: bool) -> Self {
        assert_eq!(
            data.len(),
            numel(&shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            op,
            requires_grad,
        }))
    }

    /// Builds the result of an op. The op is recorded only when grad mode is on
    /// and at least one input requires gradients.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        if is_grad_enabled() && op.inputs().iter().any(|t| t.requires_grad()) {
            Self::make(Arc::new(data), shape, Some(op), true)
        } else {
            Self::make(Arc::new(data), shape, None, false)
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::make(Arc::new(data), shape.to_vec(), None, false)
    }

    pub fn from_slice(data: &[f64], shape: &[usize]) -> Self {
        Self::from_vec(data.to_vec(), shape)
    }

    /// A leaf that accumulates gradients.
    pub fn var(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::make(Arc::new(data), shape.to_vec(), None, true)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(vec![v], &[])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_vec(vec![v; numel(shape)], shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape())
    }

    pub fn ones_like(&self) -> Self {
        Self::ones(self.shape())
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Shape as `(n, c, h, w)`; panics unless rank 4.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match *self.shape() {
            [n, c, h, w] => (n, c, h, w),
            ref s => panic!("expected a rank-4 tensor, got shape {s:?}"),
        }
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::make(self.0.data.clone(), self.0.shape.clone(), None, false)
    }

    /// Same values as a fresh gradient-accumulating leaf.
    pub fn detach_var(&self) -> Tensor {
        Self::make(self.0.data.clone(), self.0.shape.clone(), None, true)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and data.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}
