use std::sync::Arc;

use super::scalar::Scalar;
use super::tape::NodeId;
use crate::error::{Error, Result};

/// Dense N-dimensional array, row-major, optionally attached to a tape.
///
/// Tensors are value-semantic: cloning is cheap (the buffer is shared) and a
/// tensor detached from any live tape is safe to hand between threads.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<NodeId>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in shape {:?}", shape)));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![T::zero(); numel]),
            node: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; numel]),
            node: None,
            requires_grad: false,
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
            node: None,
            requires_grad: false,
        }
    }

    pub(crate) fn from_parts(
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        node: Option<NodeId>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            node,
            requires_grad: node.is_some(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn buffer(&self) -> &Arc<Vec<T>> {
        &self.data
    }

    /// Tape handle, if this tensor was produced by (or watched on) a tape.
    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Mutable access to the underlying buffer (copy-on-write if shared).
    pub(crate) fn data_mut(&mut self) -> &mut Vec<T> {
        self.node = None;
        self.requires_grad = false;
        Arc::make_mut(&mut self.data)
    }

    /// Same values, detached from any tape.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: false,
        }
    }

    /// Element-wise cast to another scalar type (used by the f64 test suites).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::of(v.as_f64())).collect()),
            node: None,
            requires_grad: false,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data_len() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(1.5f64);
        assert!(s.shape().is_empty());
        assert!(s.is_scalar());
        assert_eq!(s.item(), 1.5);
    }

    #[test]
    fn cast_preserves_values() {
        let t = Tensor::from_vec(vec![2], vec![1.25f32, -2.5]).unwrap();
        let d = t.cast::<f64>();
        assert_eq!(d.data(), &[1.25f64, -2.5]);
    }
}
