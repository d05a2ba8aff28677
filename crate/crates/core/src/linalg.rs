//! Small dense linear algebra kernels. Problem sizes here are tiny (at most a
//! few dozen unknowns) so plain loops over row-major storage are enough.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn from_diagonal(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == T::zero() {
                    continue;
                }
                for c in 0..other.cols {
                    out[(r, c)] += a * other[(k, c)];
                }
            }
        }
        out
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lower Cholesky factor of a symmetric positive semidefinite matrix.
    /// Zero pivots (up to `tol` relative to the largest diagonal entry) yield
    /// zero columns instead of an error.
    pub fn cholesky_psd(&self, tol: T) -> Result<Matrix<T>> {
        let n = self.square()?;
        let scale = self
            .diagonal()
            .into_iter()
            .fold(T::zero(), |a, b| a.max(b.abs()));
        let floor = tol * scale.max(T::min_positive_value());
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if d < -floor {
                return Err(Error::Singular(format!(
                    "matrix is not positive semidefinite (pivot {j} = {d})"
                )));
            }
            if d <= floor {
                continue;
            }
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(l)
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Matrix<T>> {
        let n = self.square()?;
        let mut a = self.clone();
        let mut inv = Matrix::identity(n);
        let scale = self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| {
                    a[(i, col)]
                        .abs()
                        .partial_cmp(&a[(j, col)].abs())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .expect("non-empty range");
            let p = a[(pivot, col)];
            if !(p.abs() > T::epsilon() * scale * T::of(n)) {
                return Err(Error::Singular(format!("zero pivot in column {col}")));
            }
            a.swap_rows(col, pivot);
            inv.swap_rows(col, pivot);
            let p_inv = T::one() / a[(col, col)];
            for c in 0..n {
                a[(col, c)] *= p_inv;
                inv[(col, c)] *= p_inv;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[(r, col)];
                if f == T::zero() {
                    continue;
                }
                for c in 0..n {
                    let ac = a[(col, c)];
                    let ic = inv[(col, c)];
                    a[(r, c)] -= f * ac;
                    inv[(r, c)] -= f * ic;
                }
            }
        }
        Ok(inv)
    }

    fn swap_rows(&mut self, i: usize, j: usize) {
        if i == j {
            return;
        }
        for c in 0..self.cols {
            self.data.swap(i * self.cols + c, j * self.cols + c);
        }
    }

    fn square(&self) -> Result<usize> {
        if self.rows != self.cols {
            return Err(Error::domain(format!(
                "expected a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(self.rows)
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Thin QR factorization of a tall design matrix given by columns, computed
/// with modified Gram-Schmidt plus one reorthogonalization sweep.
#[derive(Debug, Clone)]
pub struct ThinQr<T> {
    /// Orthonormal columns, each of length `n`.
    q: Vec<Vec<T>>,
    /// Upper-triangular `p x p` factor, row-major.
    r: Matrix<T>,
}

impl<T: Real> ThinQr<T> {
    /// Returns `None` when a column is numerically dependent on the previous
    /// ones (relative tolerance `tol`).
    pub fn factor(columns: &[Vec<T>], tol: T) -> Option<Self> {
        let p = columns.len();
        let mut q: Vec<Vec<T>> = Vec::with_capacity(p);
        let mut r = Matrix::zeros(p, p);
        for (j, col) in columns.iter().enumerate() {
            let mut w = col.clone();
            let original = norm(&w);
            for _sweep in 0..2 {
                for (k, qk) in q.iter().enumerate() {
                    let c = dot(qk, &w);
                    r[(k, j)] += c;
                    for (wi, &qi) in w.iter_mut().zip(qk) {
                        *wi -= c * qi;
                    }
                }
            }
            let rn = norm(&w);
            if !(rn > tol * original.max(T::min_positive_value())) || !rn.is_finite() {
                return None;
            }
            r[(j, j)] = rn;
            let inv = T::one() / rn;
            w.iter_mut().for_each(|v| *v *= inv);
            q.push(w);
        }
        Some(Self { q, r })
    }

    /// Like [`ThinQr::factor`] but skips columns whose residual after
    /// projection is below `tol` times their norm. Returns the indices kept.
    pub fn factor_greedy(columns: &[&[T]], tol: T) -> (Self, Vec<usize>) {
        let p = columns.len();
        let mut q: Vec<Vec<T>> = Vec::with_capacity(p);
        let mut r_cols: Vec<Vec<T>> = Vec::with_capacity(p);
        let mut kept = Vec::with_capacity(p);
        for (j, col) in columns.iter().enumerate() {
            let mut w = col.to_vec();
            let original = norm(&w);
            let mut coeffs = vec![T::zero(); q.len()];
            for _sweep in 0..2 {
                for (k, qk) in q.iter().enumerate() {
                    let c = dot(qk, &w);
                    coeffs[k] += c;
                    for (wi, &qi) in w.iter_mut().zip(qk) {
                        *wi -= c * qi;
                    }
                }
            }
            let rn = norm(&w);
            if !(rn > tol * original) || !rn.is_finite() {
                continue;
            }
            let inv = T::one() / rn;
            w.iter_mut().for_each(|v| *v *= inv);
            coeffs.push(rn);
            q.push(w);
            r_cols.push(coeffs);
            kept.push(j);
        }
        let k = q.len();
        let mut r = Matrix::zeros(k, k);
        for (j, c) in r_cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                r[(i, j)] = v;
            }
        }
        (Self { q, r }, kept)
    }

    pub fn ncols(&self) -> usize {
        self.q.len()
    }

    /// Least-squares coefficients for the right-hand side `y`.
    pub fn solve(&self, y: &[T]) -> Vec<T> {
        let qty: Vec<T> = self.q.iter().map(|qk| dot(qk, y)).collect();
        back_substitute(&self.r, &qty)
    }

    /// Projection `Q Q^T y` onto the column space.
    pub fn project(&self, y: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); y.len()];
        for qk in &self.q {
            let c = dot(qk, y);
            for (o, &qi) in out.iter_mut().zip(qk) {
                *o += c * qi;
            }
        }
        out
    }
}

fn back_substitute<T: Real>(r: &Matrix<T>, b: &[T]) -> Vec<T> {
    let p = b.len();
    let mut x = vec![T::zero(); p];
    for i in (0..p).rev() {
        let mut s = b[i];
        for k in i + 1..p {
            s -= r[(i, k)] * x[k];
        }
        x[i] = s / r[(i, i)];
    }
    x
}

/// Solves `A x = b` for symmetric positive definite `A` via Cholesky.
pub fn solve_spd<T: Real>(a: &Matrix<T>, b: &[T]) -> Result<Vec<T>> {
    let n = a.rows();
    let l = a.cholesky_psd(T::zero())?;
    if (0..n).any(|i| l[(i, i)] <= T::zero()) {
        return Err(Error::Singular("matrix is not positive definite".into()));
    }
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_roundtrip() {
        let a = Matrix::<f64>::from_rows(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, 0.2],
            vec![0.5, 0.2, 2.0],
        ]);
        let inv = a.inverse().unwrap();
        let id = a.matmul(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id[(i, j)] - e).abs() < 1e-14);
            }
        }
        let singular = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(singular.inverse().is_err());
    }

    #[test]
    fn cholesky_accepts_semidefinite() {
        let a = Matrix::<f64>::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let l = a.cholesky_psd(1e-12).unwrap();
        let back = l.matmul(&l.transpose());
        assert!((back[(1, 1)] - 1.0).abs() < 1e-14);
        assert_eq!(l[(1, 1)], 0.0);
        let bad = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(bad.cholesky_psd(1e-12).is_err());
    }

    #[test]
    fn qr_solves_overdetermined() {
        let x0: Vec<f64> = (0..20).map(|i| 1.0 + i as f64 * 0.1).collect();
        let ones = vec![1.0; 20];
        let y: Vec<f64> = x0.iter().map(|x| 2.0 - 3.0 * x).collect();
        let qr = ThinQr::factor(&[ones.clone(), x0.clone()], 1e-10).unwrap();
        let b = qr.solve(&y);
        assert!((b[0] - 2.0).abs() < 1e-12 && (b[1] + 3.0).abs() < 1e-12);
        assert!(ThinQr::factor(&[ones.clone(), ones], 1e-10).is_none());
    }

    #[test]
    fn spd_solve() {
        let a = Matrix::from_rows(&[vec![2.0f32, 1.0], vec![1.0, 3.0]]);
        let x = solve_spd(&a, &[3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-6 && (x[1] - 1.4).abs() < 1e-6);
    }
}
