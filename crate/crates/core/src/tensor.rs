//! Dense row-major tensors.
//!
//! The numeric carrier for the whole model: rank-1 and rank-2 real arrays
//! backed by a flat `Vec<f64>`. Anything differentiable goes through the
//! gradient tape in [`crate::tape`]; a bare `Tensor` is an immutable value
//! that is safe to share across threads.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch: {op} got shapes {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements, data has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("softmax row {row} has no attendable entries (all masked)")]
    DegenerateRow { row: usize },
    #[error("non-finite value in {context} at flat index {index}: {value}")]
    NonFinite {
        context: String,
        index: usize,
        value: f64,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{op}: slice [{start}, {start}+{len}) out of bounds for extent {extent}")]
    SliceOutOfBounds {
        op: &'static str,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("gather index {index} out of bounds for table with {rows} rows")]
    GatherOutOfBounds { index: usize, rows: usize },
}

/// Dense tensor with row-major storage. Rank 1 or 2 covers everything the
/// model needs; no broadcasting beyond bias-add and row-wise scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from rows×cols row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of the last two axes; rank-1 tensors are treated as
    /// a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => {
                let cols = *self.shape.last().unwrap_or(&1);
                (self.numel() / cols.max(1), cols)
            }
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.rows_cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Checked mode: NaN/Inf detection. Masked attention scores legitimately
    /// carry `-inf`, so this is invoked at specific boundaries rather than
    /// after every op.
    pub fn validate_finite(&self, context: &str) -> Result<(), TensorError> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    context: context.to_string(),
                    index: i,
                    value: v,
                });
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Largest |a - b| over all elements; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Exact bit equality, used by determinism and round-trip contracts.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_enforced() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        match err {
            TensorError::ShapeDataMismatch {
                expected, actual, ..
            } => {
                assert_eq!(expected, 6);
                assert_eq!(actual, 5);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn finite_check_flags_nan() {
        let t = Tensor::vector(vec![1.0, f64::NAN]);
        assert!(t.validate_finite("test").is_err());
        let ok = Tensor::vector(vec![1.0, 2.0]);
        assert!(ok.validate_finite("test").is_ok());
    }

    #[test]
    fn identity_and_row_access() {
        let i = Tensor::identity(3);
        assert_eq!(i.row(1), &[0.0, 1.0, 0.0]);
        assert_eq!(i.rows_cols(), (3, 3));
    }
}
