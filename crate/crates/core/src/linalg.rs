//! Small dense row-major matrices and the handful of factorizations the
//! solver needs. Dimensions here are tiny (state/input blocks), so plain
//! loops beat any external linear-algebra dependency.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[&[T]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut m = Mat::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c);
            m.data[i * c..(i + 1) * c].copy_from_slice(row);
        }
        m
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
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn transpose(&self) -> Mat<T> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// out = self * other
    pub fn mul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        self.mul_into(other, &mut out);
        out
    }

    pub fn mul_into(&self, other: &Mat<T>, out: &mut Mat<T>) {
        assert_eq!(self.cols, other.rows);
        assert_eq!(out.rows, self.rows);
        assert_eq!(out.cols, other.cols);
        for i in 0..self.rows {
            let orow = out.row_mut(i);
            orow.iter_mut().for_each(|x| *x = T::zero());
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
    }

    /// out = selfᵀ * other
    pub fn tr_mul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.rows, other.rows);
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for i in 0..self.cols {
                let a = arow[i];
                if a == T::zero() {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// y = self * x
    pub fn mul_vec(&self, x: &[T], y: &mut [T]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = T::zero();
            for (&a, &b) in row.iter().zip(x) {
                acc += a * b;
            }
            y[i] = acc;
        }
    }

    /// y += self * x
    pub fn mul_vec_add(&self, x: &[T], y: &mut [T]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = T::zero();
            for (&a, &b) in row.iter().zip(x) {
                acc += a * b;
            }
            y[i] += acc;
        }
    }

    /// y += selfᵀ * x
    pub fn tr_mul_vec_add(&self, x: &[T], y: &mut [T]) {
        assert_eq!(x.len(), self.rows);
        assert_eq!(y.len(), self.cols);
        for k in 0..self.rows {
            let a = x[k];
            if a == T::zero() {
                continue;
            }
            for (o, &b) in y.iter_mut().zip(self.row(k)) {
                *o += a * b;
            }
        }
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, other: &Mat<T>, scale: T) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// self += wᵀ-weighted outer products of the rows of `c`:  Σ_r w_r c_rᵀ c_r.
    pub fn add_weighted_gram(&mut self, c: &Mat<T>, w: &[T]) {
        assert_eq!(self.rows, c.cols);
        assert_eq!(self.cols, c.cols);
        assert_eq!(w.len(), c.rows);
        for r in 0..c.rows {
            let wr = w[r];
            if wr == T::zero() {
                continue;
            }
            let row = c.row(r);
            for i in 0..c.cols {
                let ci = wr * row[i];
                if ci == T::zero() {
                    continue;
                }
                let orow = &mut self.data[i * self.cols..(i + 1) * self.cols];
                for (o, &cj) in orow.iter_mut().zip(row) {
                    *o += ci * cj;
                }
            }
        }
    }

    /// self += Σ_r w_r a_rᵀ b_r for matching rows of `a` (cols = self.rows)
    /// and `b` (cols = self.cols).
    pub fn add_weighted_cross(&mut self, a: &Mat<T>, b: &Mat<T>, w: &[T]) {
        assert_eq!(a.rows, b.rows);
        assert_eq!(self.rows, a.cols);
        assert_eq!(self.cols, b.cols);
        for r in 0..a.rows {
            let wr = w[r];
            if wr == T::zero() {
                continue;
            }
            let arow = a.row(r);
            let brow = b.row(r);
            for i in 0..a.cols {
                let ci = wr * arow[i];
                if ci == T::zero() {
                    continue;
                }
                let orow = &mut self.data[i * self.cols..(i + 1) * self.cols];
                for (o, &bj) in orow.iter_mut().zip(brow) {
                    *o += ci * bj;
                }
            }
        }
    }

    pub fn symmetrize(&mut self) {
        assert_eq!(self.rows, self.cols);
        let half = T::lit(0.5);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = half * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}

impl<T> std::ops::Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Lower Cholesky factor stored densely; solves share the allocation.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: Mat<T>,
}

impl<T: Real> Cholesky<T> {
    /// Factor a symmetric positive-definite matrix. On failure the caller
    /// should regularize and retry; the message carries the pivot index.
    pub fn new(m: &Mat<T>) -> Result<Self> {
        assert_eq!(m.rows(), m.cols());
        let n = m.rows();
        let mut l = m.clone();
        for j in 0..n {
            for k in 0..j {
                let ljk = l[(j, k)];
                if ljk == T::zero() {
                    continue;
                }
                for i in j..n {
                    let v = l[(i, k)];
                    l[(i, j)] = l[(i, j)] - v * ljk;
                }
            }
            let d = l[(j, j)];
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::numerical(format!(
                    "cholesky pivot {j} not positive ({})",
                    d.to_f64_lossy()
                )));
            }
            let s = d.sqrt();
            l[(j, j)] = s;
            let inv = T::one() / s;
            for i in (j + 1)..n {
                l[(i, j)] = l[(i, j)] * inv;
            }
        }
        // zero strict upper triangle
        for i in 0..n {
            for j in (i + 1)..n {
                l[(i, j)] = T::zero();
            }
        }
        Ok(Cholesky { l })
    }

    /// Factor with escalating diagonal regularization.
    pub fn new_regularized(m: &Mat<T>, base_reg: T) -> Result<Self> {
        match Cholesky::new(m) {
            Ok(c) => Ok(c),
            Err(_) => {
                let mut reg = base_reg.max(T::lit(1e-12));
                for _ in 0..12 {
                    let mut shifted = m.clone();
                    for i in 0..m.rows() {
                        shifted[(i, i)] += reg;
                    }
                    if let Ok(c) = Cholesky::new(&shifted) {
                        return Ok(c);
                    }
                    reg *= T::lit(100.0);
                }
                Err(Error::numerical("cholesky failed despite regularization"))
            }
        }
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.l.rows();
        assert_eq!(b.len(), n);
        // L y = b
        for i in 0..n {
            let mut acc = b[i];
            for k in 0..i {
                acc -= self.l[(i, k)] * b[k];
            }
            b[i] = acc / self.l[(i, i)];
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let mut acc = b[i];
            for k in (i + 1)..n {
                acc -= self.l[(k, i)] * b[k];
            }
            b[i] = acc / self.l[(i, i)];
        }
    }

    /// Solve for every column of a matrix right-hand side in place.
    pub fn solve_mat_in_place(&self, b: &mut Mat<T>) {
        let n = self.l.rows();
        assert_eq!(b.rows(), n);
        let mut col = vec![T::zero(); n];
        for j in 0..b.cols() {
            for i in 0..n {
                col[i] = b[(i, j)];
            }
            self.solve_in_place(&mut col);
            for i in 0..n {
                b[(i, j)] = col[i];
            }
        }
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn max_abs<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        // A = Lᵀ L with a known well-conditioned matrix
        let a = Mat::<f64>::from_rows(&[
            &[4.0, 1.0, 0.5],
            &[1.0, 3.0, 0.2],
            &[0.5, 0.2, 2.0],
        ]);
        let chol = Cholesky::new(&a).unwrap();
        let x_true = [1.0, -2.0, 3.0];
        let mut b = [0.0; 3];
        a.mul_vec(&x_true, &mut b);
        chol.solve_in_place(&mut b);
        for i in 0..3 {
            assert!((b[i] - x_true[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Mat::<f64>::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(Cholesky::new(&a).is_err());
    }

    #[test]
    fn weighted_gram_matches_direct() {
        let c = Mat::<f64>::from_rows(&[&[1.0, 2.0], &[0.0, -1.0], &[3.0, 0.5]]);
        let w = [2.0, 1.0, 0.5];
        let mut g = Mat::<f64>::zeros(2, 2);
        g.add_weighted_gram(&c, &w);
        // direct: Cᵀ diag(w) C
        let mut expect = Mat::<f64>::zeros(2, 2);
        for r in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    expect[(i, j)] += w[r] * c[(r, i)] * c[(r, j)];
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!((g[(i, j)] - expect[(i, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn tr_mul_matches_transpose_mul() {
        let a = Mat::<f64>::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = Mat::<f64>::from_rows(&[&[1.0, 0.5], &[-1.0, 2.0]]);
        let direct = a.transpose().mul(&b);
        let fused = a.tr_mul(&b);
        assert_eq!(direct, fused);
    }
}
