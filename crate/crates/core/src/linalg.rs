//! Dense row-major matrices, a rank-3 tensor, and a small LU solver.
//!
//! Nothing here is clever: the engine's hot loops are matrix-vector products
//! inside the recurrent cells, so `dot` unrolls into four independent
//! accumulators (a fixed reassociation, identical on every run) and
//! everything else stays straightforward.

use crate::error::{Error, Result};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Dot product with four-lane unrolling.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// y += alpha * x
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// self (m×k) times otherᵀ where other is (n×k), giving (m×n).
    ///
    /// Both operands are walked along contiguous rows, which is why the
    /// weight matrices in this crate store the transposed orientation.
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            let orow = out.row_mut(r);
            for (c, o) in orow.iter_mut().enumerate() {
                *o = dot(a, other.row(c));
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// Rank-3 tensor, row-major over (d0, d1, d2).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub d0: usize,
    pub d1: usize,
    pub d2: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Tensor3 { d0, d1, d2, data: vec![0.0; d0 * d1 * d2] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.d1 + j) * self.d2 + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.d1 + j) * self.d2 + k] = v;
    }

    /// The contiguous (d1×d2) plane at index i of the leading axis.
    #[inline]
    pub fn plane(&self, i: usize) -> &[f64] {
        &self.data[i * self.d1 * self.d2..(i + 1) * self.d1 * self.d2]
    }

    #[inline]
    pub fn plane_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.d1 * self.d2..(i + 1) * self.d1 * self.d2]
    }

    /// Copies planes [lo, hi) of the leading axis into a new tensor.
    pub fn slice_planes(&self, lo: usize, hi: usize) -> Tensor3 {
        assert!(lo <= hi && hi <= self.d0);
        Tensor3 {
            d0: hi - lo,
            d1: self.d1,
            d2: self.d2,
            data: self.data[lo * self.d1 * self.d2..hi * self.d1 * self.d2].to_vec(),
        }
    }
}

/// Solves A x = b by LU decomposition with partial pivoting.
///
/// A is consumed as workspace. Fails on (numerically) singular systems.
pub fn lu_solve(mut a: Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows;
    if a.cols != n || b.len() != n {
        return Err(Error::Shape(format!(
            "lu_solve needs square A and matching b: A is {}x{}, b has {}",
            a.rows, a.cols, b.len()
        )));
    }
    let mut x = Vec::from(b);
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut pivot = col;
        let mut best = crate::math::abs(a.get(col, col));
        for r in col + 1..n {
            let v = crate::math::abs(a.get(r, col));
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best < 1e-300 {
            return Err(Error::Numeric(format!("singular system at column {col}")));
        }
        if pivot != col {
            for c in 0..n {
                let tmp = a.get(col, c);
                a.set(col, c, a.get(pivot, c));
                a.set(pivot, c, tmp);
            }
            x.swap(col, pivot);
            perm.swap(col, pivot);
        }
        let d = a.get(col, col);
        for r in col + 1..n {
            let f = a.get(r, col) / d;
            if f != 0.0 {
                a.set(r, col, 0.0);
                for c in col + 1..n {
                    let v = a.get(r, c) - f * a.get(col, c);
                    a.set(r, c, v);
                }
                x[r] -= f * x[col];
            }
        }
    }
    for col in (0..n).rev() {
        x[col] /= a.get(col, col);
        for r in 0..col {
            let f = a.get(r, col);
            x[r] -= f * x[col];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn matmul_nt_small_case() {
        // A = [[1,2],[3,4]], B rows are the columns of the classical right operand
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let bt = Matrix::from_vec(2, 2, vec![5.0, 7.0, 6.0, 8.0]); // B = [[5,6],[7,8]]
        let c = a.matmul_nt(&bt);
        assert_eq!(c.data, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn lu_solves_known_system() {
        let a = Matrix::from_vec(3, 3, vec![2.0, 1.0, 1.0, 1.0, 3.0, 2.0, 1.0, 0.0, 0.0]);
        let b = [4.0, 5.0, 6.0];
        let x = lu_solve(a.clone(), &b).unwrap();
        for r in 0..3 {
            let lhs = dot(a.row(r), &x);
            assert!((lhs - b[r]).abs() < 1e-10);
        }
    }

    #[test]
    fn lu_rejects_singular() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        assert!(lu_solve(a, &[1.0, 2.0]).is_err());
    }

    #[test]
    #[allow(clippy::identity_op)] // the index spells out row * cols + col
    fn tensor_plane_layout() {
        let mut t = Tensor3::zeros(2, 2, 3);
        t.set(1, 1, 2, 9.0);
        assert_eq!(t.plane(1)[1 * 3 + 2], 9.0);
        let s = t.slice_planes(1, 2);
        assert_eq!(s.get(0, 1, 2), 9.0);
    }
}
