use std::fmt;

use num_traits::{Num, Zero};

use super::AdapterError;

/// Dense row-major matrix over any numeric scalar.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for row in self.data.chunks(self.cols.max(1)) {
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}

impl<T> Matrix<T> {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, AdapterError> {
        if data.len() != rows * cols {
            return Err(AdapterError::Ragged(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self, AdapterError> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(AdapterError::Ragged(format!(
                "row {bad} has {} values, expected {cols}",
                rows[bad].len()
            )));
        }
        Ok(Matrix {
            rows: n,
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[i * self.cols + j]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Clone + Zero> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(Zero::is_zero)
    }
}

impl<T: Num + Clone> Matrix<T> {
    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>, AdapterError> {
        if self.cols != rhs.rows {
            return Err(AdapterError::ShapeMismatch {
                what: "matrix product",
                expected: (self.cols, rhs.cols),
                got: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for (p, a) in self.row(i).iter().enumerate() {
                if a.is_zero() {
                    continue;
                }
                for j in 0..rhs.cols {
                    let cell: &mut T = &mut out.data[i * rhs.cols + j];
                    *cell = cell.clone() + a.clone() * rhs.get(p, j).clone();
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix<T>) -> Result<Matrix<T>, AdapterError> {
        if self.shape() != rhs.shape() {
            return Err(AdapterError::ShapeMismatch {
                what: "matrix sum",
                expected: self.shape(),
                got: rhs.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a.clone() + b.clone())
                .collect(),
        })
    }

    pub fn scale(&self, s: &T) -> Matrix<T> {
        self.map(|v| v.clone() * s.clone())
    }

    /// Squared Frobenius norm.
    pub fn frobenius_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, v| acc + v.clone() * v.clone())
    }
}
