//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a define-by-run tape: every forward op appends a node that
//! holds its output value and, when any input requires a gradient, the rule to
//! push gradients back to its inputs. [`Graph::backward`] walks the tape in
//! reverse. Values are `f64`; this keeps the finite-difference harness in
//! [`finite_diff_check`] meaningful at tight tolerances.

mod gemm;
mod gradcheck;
mod graph;

pub use gradcheck::finite_diff_check;
pub use graph::{Graph, Var};

pub(crate) use gemm::gemm;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("division by zero in {op}")]
    DivisionByZero { op: &'static str },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; call zero_grad before running it again")]
    BackwardTwice,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength { len: data.len(), shape });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a `rows × cols` matrix from row slices of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    Ok((outer, shape[axis], inner))
}
