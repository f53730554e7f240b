//! Dense rank-2 tensor over the build-profile real type.
//!
//! Everything in the pipeline is a matrix, a row vector, or a scalar, so the
//! shape is a fixed `[rows, cols]` pair. Data is contiguous row-major.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::{Index, IndexMut};

/// Element type: 64-bit by default, 32-bit with the `single-precision` feature.
#[cfg(feature = "single-precision")]
pub type Real = f32;
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<Real>,
}

impl Tensor {
    /// Builds a tensor from row-major data. Panics if the length disagrees
    /// with the shape (contract violation).
    pub fn new(rows: usize, cols: usize, data: Vec<Real>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape [{rows}, {cols}]",
            data.len()
        );
        Tensor {
            shape: [rows, cols],
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: Real) -> Self {
        Tensor {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    /// 1x1 tensor.
    pub fn scalar(value: Real) -> Self {
        Tensor::new(1, 1, vec![value])
    }

    /// 1xN row vector.
    pub fn row(data: Vec<Real>) -> Self {
        Tensor {
            shape: [1, data.len()],
            data,
        }
    }

    /// Builds from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<Real>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows: {} vs {}", row.len(), c);
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    /// The single element of a 1x1 tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.shape, [1, 1], "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    pub fn row_slice(&self, r: usize) -> &[Real] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        assert_eq!(
            self.shape, other.shape,
            "max_abs_diff shape mismatch: {:?} vs {:?}",
            self.shape, other.shape
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }

    /// Plain matrix product (ikj loop order). Panics on inner-dim mismatch.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols(),
            other.rows(),
            "matmul shape mismatch: lhs {:?} rhs {:?}",
            self.shape,
            other.shape
        );
        let (n, k, m) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let lhs_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(n, m, out)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(c, r, out)
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; panics on shape mismatch.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(Real, Real) -> Real) -> Tensor {
        assert_eq!(
            self.shape, other.shape,
            "elementwise shape mismatch: {:?} vs {:?}",
            self.shape, other.shape
        );
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Squared Frobenius norm.
    pub fn sq_norm(&self) -> Real {
        self.data.iter().map(|v| v * v).sum()
    }
}

impl Index<(usize, usize)> for Tensor {
    type Output = Real;
    fn index(&self, (r, c): (usize, usize)) -> &Real {
        debug_assert!(r < self.rows() && c < self.cols(), "index ({r},{c}) out of {:?}", self.shape);
        &self.data[r * self.shape[1] + c]
    }
}

impl IndexMut<(usize, usize)> for Tensor {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Real {
        debug_assert!(r < self.rows() && c < self.cols(), "index ({r},{c}) out of {:?}", self.shape);
        &mut self.data[r * self.shape[1] + c]
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.shape[0], self.shape[1])?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}
