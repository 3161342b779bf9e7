//! Dense n-dimensional tensors.
//!
//! A `Tensor` is an immutable flat buffer plus a shape. Gradients are not
//! stored on the tensor; [`crate::tape::Tape::backward`] returns them in a
//! separate map keyed by tensor id. Cloning a tensor is cheap (shared
//! buffer).

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Element type; `f64` by default, `f32` with the `f32` crate feature.
#[cfg(not(feature = "f32"))]
pub type Elem = f64;
#[cfg(feature = "f32")]
pub type Elem = f32;

/// Name of the element type, recorded in checkpoint manifests.
#[cfg(not(feature = "f32"))]
pub const DTYPE: &str = "f64";
#[cfg(feature = "f32")]
pub const DTYPE: &str = "f32";

/// Process-unique tensor identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub u64);

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> TensorId {
    TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
}

#[derive(Debug)]
struct TensorData {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<Elem>,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
pub struct Tensor {
    inner: Rc<TensorData>,
}

impl Tensor {
    /// Build a tensor from a shape and a flat buffer.
    ///
    /// Panics if `product(shape) != data.len()` or any dimension is zero;
    /// that is a programming error, not a runtime condition.
    pub fn new(shape: Vec<usize>, data: Vec<Elem>, requires_grad: bool) -> Tensor {
        let numel: usize = shape.iter().product();
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        assert_eq!(
            numel,
            data.len(),
            "shape {shape:?} does not match buffer length {}",
            data.len()
        );
        Tensor {
            inner: Rc::new(TensorData { id: fresh_id(), shape, data, requires_grad }),
        }
    }

    pub fn constant(shape: Vec<usize>, data: Vec<Elem>) -> Tensor {
        Tensor::new(shape, data, false)
    }

    pub fn param(shape: Vec<usize>, data: Vec<Elem>) -> Tensor {
        Tensor::new(shape, data, true)
    }

    pub fn scalar(value: Elem) -> Tensor {
        Tensor::constant(vec![1], vec![value])
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor::constant(shape, vec![0.0; numel])
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[Elem] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Elem {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Value-identical copy that does not participate in differentiation.
    pub fn detached(&self) -> Tensor {
        if !self.requires_grad() {
            self.clone()
        } else {
            Tensor::constant(self.shape().to_vec(), self.data().to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique() {
        let a = Tensor::scalar(1.0);
        let b = Tensor::scalar(1.0);
        assert_ne!(a.id(), b.id());
    }

    #[test]
    fn clone_shares_buffer_and_id() {
        let a = Tensor::param(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = a.clone();
        assert_eq!(a.id(), b.id());
        assert_eq!(a.data().as_ptr(), b.data().as_ptr());
    }

    #[test]
    #[should_panic]
    fn shape_must_match_buffer() {
        let _ = Tensor::constant(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn detached_drops_grad_flag() {
        let a = Tensor::param(vec![2], vec![1.0, 2.0]);
        let d = a.detached();
        assert!(!d.requires_grad());
        assert_eq!(d.data(), a.data());
        assert_ne!(d.id(), a.id());
    }
}
