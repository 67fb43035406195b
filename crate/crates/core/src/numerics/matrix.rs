use std::fmt;

use super::{NumericsError, Scalar};

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.iter().take(16)).finish()?;
        if self.data.len() > 16 {
            write!(f, " ...")?;
        }
        Ok(())
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn scalar(value: T) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Converts from `f64` values, e.g. environment observations.
    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self, NumericsError> {
        Self::new(rows, cols, data.iter().map(|&x| T::lit(x)).collect())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1×1 matrix.
    pub fn item(&self) -> Option<T> {
        (self.rows == 1 && self.cols == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self, NumericsError> {
        if self.cols != rhs.rows {
            return Err(NumericsError::Shape {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        gemm_into(self, false, rhs, false, &mut out, false);
        Ok(out)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        (self.shape() == other.shape()).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .fold(T::zero(), |acc, (a, b)| acc.max((*a - *b).abs()))
        })
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    /// Elementwise `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::lit(x.to_f64_lossy())).collect(),
        }
    }
}

/// `out (+)= op(a)·op(b)` where `op` optionally transposes. Shapes are the caller's
/// responsibility and are only debug-checked.
pub(crate) fn gemm_into<T: Scalar>(
    a: &Matrix<T>,
    trans_a: bool,
    b: &Matrix<T>,
    trans_b: bool,
    out: &mut Matrix<T>,
    accumulate: bool,
) {
    let (m, k, a_strides) = if trans_a {
        (a.cols, a.rows, (1, a.cols as isize))
    } else {
        (a.rows, a.cols, (a.cols as isize, 1))
    };
    let (kb, n, b_strides) = if trans_b {
        (b.cols, b.rows, (1, b.cols as isize))
    } else {
        (b.rows, b.cols, (b.cols as isize, 1))
    };
    debug_assert_eq!(k, kb);
    debug_assert_eq!(out.shape(), (m, n));
    let beta = if accumulate { T::one() } else { T::zero() };
    let c_strides = (n as isize, 1);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &a.data,
        a_strides,
        &b.data,
        b_strides,
        beta,
        &mut out.data,
        c_strides,
    );
}
