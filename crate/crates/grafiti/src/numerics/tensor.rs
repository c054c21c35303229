//! Dense row-major tensors.
//!
//! Values are immutable once created (data is shared behind an `Rc`), so
//! tensors are cheap to clone and safe to hand to tape closures. A tensor
//! optionally carries the id of the tape node that produced it; tensors
//! without a node id are treated as constants by every operation.

use std::rc::Rc;

use crate::numerics::NumericsError;

/// Dense real-valued array with shape metadata.
///
/// Tensors are 1-D (vectors) or 2-D (row-major matrices) in this crate.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    pub(crate) node: Option<usize>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(NumericsError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Rc::new(data),
            requires_grad: false,
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Rc::new(vec![0.0; n]),
            requires_grad: false,
            node: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Rc::new(vec![x]),
            requires_grad: false,
            node: None,
        }
    }

    /// 2-D tensor from a row-major flat slice.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor {
            shape: vec![n],
            data: Rc::new(data),
            requires_grad: false,
            node: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            shape: vec![n, n],
            data: Rc::new(data),
            requires_grad: false,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the underlying values; clones the buffer if shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Rc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn set_requires_grad(&mut self, v: bool) {
        self.requires_grad = v;
    }

    /// Number of rows: leading dimension, or 1 for a vector treated as a row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Number of columns of a matrix, or the length of a vector.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => self.data.len(),
        }
    }

    /// Extracts the single value of a one-element tensor.
    pub fn item(&self) -> Result<f64, NumericsError> {
        if self.data.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same shape and bit-identical values.
    pub fn value_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
