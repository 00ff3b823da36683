//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer plus an optional
//! record of the operation that produced it. Calling
//! [`backward`](Tensor::backward) on a scalar walks those records in reverse
//! creation order (see [`GradTape`]) and accumulates gradients into every
//! leaf created with `requires_grad`.

mod archive;
mod autograd;
pub mod counter;
mod element;
mod gradcheck;
mod linalg;
mod nn;
mod ops;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use archive::{read_archive, read_archive_from, write_archive, write_archive_to, NamedTensor};
pub use autograd::{grad_enabled, no_grad, GradTape, NoGradGuard};
pub use element::Element;
pub(crate) use element::{gemm, Layout};
pub use gradcheck::{check_params, grad_check, GradCheckReport};

/// Computes the gradients of a node's inputs from the gradient of its output.
///
/// Arguments are the output gradient, the output values, and the node's
/// inputs. Returns one entry per input; `None` means "no contribution".
pub type BackwardFn<T> =
    Box<dyn Fn(&[T], &[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct Node<T: Element> {
    pub op: &'static str,
    pub inputs: Vec<Tensor<T>>,
    pub backward: BackwardFn<T>,
}

struct Inner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: Mutex<Option<Vec<T>>>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub struct Tensor<T: Element = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.shape());
        if data.len() <= 16 {
            d.field("data", &&data[..]);
        }
        if let Some(node) = &self.inner.node {
            d.field("op", &node.op);
        }
        d.field("requires_grad", &self.requires_grad()).finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a contiguous shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Element> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad,
                node,
            }),
        }
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!("zero-sized dimension in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![], vec![v], false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::build(shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self::build(shape.to_vec(), data, false, None)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::of(rng.random_range(lo..hi)))
            .collect();
        Self::build(shape.to_vec(), data, false, None)
    }

    /// A fresh leaf holding a copy of this tensor's values that accumulates
    /// gradient.
    pub fn into_param(self) -> Self {
        let shape = self.shape().to_vec();
        let data = match Arc::try_unwrap(self.inner) {
            Ok(inner) => inner.data.into_inner(),
            Err(shared) => shared.data.read().clone(),
        };
        Self::build(shape, data, true, None)
    }

    /// Leaf copy without tape history.
    pub fn detach(&self) -> Self {
        Self::build(self.shape().to_vec(), self.to_vec(), false, None)
    }

    /// Records the result of a differentiable operation.
    ///
    /// When gradients are disabled or no input requires them, the result is a
    /// plain constant and `backward` is dropped. Custom kernels outside this
    /// module use this to join the tape.
    pub fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let tracked = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = tracked.then(|| Node {
            op,
            inputs,
            backward,
        });
        Self::build(shape, data, tracked, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.inner.shape[axis]
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.inner.data.read()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.shape());
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.inner.node.as_ref()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock() = None;
    }

    /// Applies `f` to the accumulated gradient in place, if any.
    pub fn with_grad_mut<R>(&self, f: impl FnOnce(&mut Vec<T>) -> R) -> Option<R> {
        self.inner.grad.lock().as_mut().map(f)
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.lock();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// In-place update of a leaf's values (optimizer steps, finite
    /// differences). Tape nodes that already captured this tensor see the
    /// new values, so only call this between forward passes.
    pub fn update_data<R>(&self, f: impl FnOnce(&mut [T]) -> R) -> R {
        f(&mut self.inner.data.write())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::of(v.f64())).collect();
        let t = Tensor::build(self.shape().to_vec(), data, false, None);
        if self.requires_grad() && self.is_leaf() {
            t.into_param()
        } else {
            t
        }
    }
}
