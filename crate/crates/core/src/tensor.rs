//! Dense row-major matrices and the handful of kernels the transformer needs.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self::from_vec(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    /// Stacks `self` on top of `below`.
    pub fn vstack(&self, below: &Self) -> Self {
        assert_eq!(self.cols, below.cols, "vstack width mismatch");
        let mut data = Vec::with_capacity(self.data.len() + below.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&below.data);
        Self::from_vec(self.rows + below.rows, self.cols, data)
    }

    pub fn push_row(&mut self, row: &[T]) {
        assert_eq!(row.len(), self.cols, "row width mismatch");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|a| *a = T::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// `self · w` where `w` is `k × m`.
    pub fn matmul(&self, w: &Self) -> Self {
        assert_eq!(self.cols, w.rows, "matmul inner dimension mismatch");
        let mut out = Self::zeros(self.rows, w.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * w.cols..(i + 1) * w.cols];
            for (p, &ap) in a.iter().enumerate() {
                if ap == T::zero() {
                    continue;
                }
                axpy(o, ap, w.row(p));
            }
        }
        out
    }

    /// `self · wᵀ` where `w` is `m × k`.
    pub fn matmul_t(&self, w: &Self) -> Self {
        assert_eq!(self.cols, w.cols, "matmul_t inner dimension mismatch");
        let mut out = Self::zeros(self.rows, w.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..w.rows {
                out.data[i * w.rows + j] = dot(a, w.row(j));
            }
        }
        out
    }

    /// Accumulates `selfᵀ · dy` into `acc` (the weight-gradient product).
    pub fn t_matmul_acc(&self, dy: &Self, acc: &mut Self) {
        assert_eq!(self.rows, dy.rows);
        assert_eq!(acc.shape(), (self.cols, dy.cols));
        for i in 0..self.rows {
            let a = self.row(i);
            let d = dy.row(i);
            for (p, &ap) in a.iter().enumerate() {
                if ap == T::zero() {
                    continue;
                }
                axpy(&mut acc.data[p * dy.cols..(p + 1) * dy.cols], ap, d);
            }
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators let the compiler vectorize.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += a · x`
#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Log-softmax of `v`, returned as a new vector.
pub fn log_softmax<T: Scalar>(v: &[T]) -> Vec<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = v.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    v.iter().map(|&x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let w = Matrix::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.0, 1.0]]);
        let y = a.matmul(&w);
        assert_eq!(y.data(), &[-1.0, 7.5, -1.0, 18.0]);
        let wt = Matrix::from_rows(&[vec![1.0, -1.0, 0.0], vec![0.5, 2.0, 1.0]]);
        assert_eq!(a.matmul_t(&wt), y);
        let mut acc = Matrix::zeros(3, 2);
        a.t_matmul_acc(&y, &mut acc);
        assert_eq!(acc.get(0, 0), -1.0 + -4.0);
    }

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[1000.0f64, 0.0, -3.0]);
        let s: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
