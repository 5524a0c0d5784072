//! Row-major dense matrices over f64.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::flops;

/// Shape violation reported with both operand shapes.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("matmul dimension mismatch: left is {lr}x{lc}, right is {rr}x{rc}")]
    MatMul { lr: usize, lc: usize, rr: usize, rc: usize },
    #[error("elementwise shape mismatch: {lr}x{lc} vs {rr}x{rc}")]
    Elementwise { lr: usize, lc: usize, rr: usize, rc: usize },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataLength { len: usize, rows: usize, cols: usize },
}

/// Dense matrix, row-major storage. Invariant: `data.len() == rows * cols`
/// and no public operation lets a NaN or infinity escape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Numerically plain logistic; callers rely on exact `1/(1+exp(-x))`.
pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if data.len() != rows * cols {
            return Err(ShapeError::DataLength { len: data.len(), rows, cols });
        }
        let m = Matrix { rows, cols, data };
        m.debug_check_finite("from_vec");
        Ok(m)
    }

    /// Panicking constructor for literals in tests and fixed tables.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged row in from_rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        let m = Matrix { rows, cols, data };
        m.debug_check_finite("from_fn");
        m
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Single element of a 1x1 matrix.
    pub fn scalar(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "scalar() on a {}x{} matrix", self.rows, self.cols);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn debug_check_finite(&self, op: &str) {
        debug_assert!(self.is_finite(), "non-finite value escaped {op}");
    }

    /// Product, charging `2 * m * k * n` to the global FLOP counter.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, ShapeError> {
        if self.cols != rhs.rows {
            return Err(ShapeError::MatMul {
                lr: self.rows,
                lc: self.cols,
                rr: rhs.rows,
                rc: rhs.cols,
            });
        }
        flops::add(2 * self.rows as u64 * self.cols as u64 * rhs.cols as u64);
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let lrow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &l) in lrow.iter().enumerate() {
                let rrow = &rhs.data[p * n..(p + 1) * n];
                for (o, &r) in orow.iter_mut().zip(rrow.iter()) {
                    *o += l * r;
                }
            }
        }
        let m = Matrix { rows: m, cols: n, data: out };
        m.debug_check_finite("matmul");
        Ok(m)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let m = Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        };
        m.debug_check_finite("map");
        m
    }

    pub fn zip_map(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix, ShapeError> {
        if (self.rows, self.cols) != (rhs.rows, rhs.cols) {
            return Err(ShapeError::Elementwise {
                lr: self.rows,
                lc: self.cols,
                rr: rhs.rows,
                rc: rhs.cols,
            });
        }
        let m = Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(rhs.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        };
        m.debug_check_finite("zip_map");
        Ok(m)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix, ShapeError> {
        self.zip_map(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix, ShapeError> {
        self.zip_map(rhs, |a, b| a - b)
    }

    pub fn mul_elem(&self, rhs: &Matrix) -> Result<Matrix, ShapeError> {
        self.zip_map(rhs, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    /// Stabilized softmax across each row; rows sum to 1.
    pub fn row_softmax(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out.debug_check_finite("row_softmax");
        out
    }

    pub fn row_sums(&self) -> Matrix {
        Matrix::from_fn(self.rows, 1, |i, _| self.row(i).iter().sum())
    }

    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j] += self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Squared Frobenius distance, for test tolerances.
    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        self.data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
