//! Dense row-major matrices and the handful of factorizations the models need.
//!
//! Everything is `f64`. Matrix products go through `matrixmultiply`; the
//! Cholesky factorization and triangular solves are blocked so that the bulk
//! of the work lands in the same gemm kernel.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

const BLOCK: usize = 64;

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{}", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row: Vec<String> = (0..self.cols.min(8))
                .map(|j| format!("{:>10.4e}", self[(i, j)]))
                .collect();
            writeln!(f, "  [{}]", row.join(", "))?;
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Mat { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec: shape/data mismatch");
        Mat { rows, cols, data }
    }

    /// Column vector.
    pub fn col(data: Vec<f64>) -> Self {
        let n = data.len();
        Mat { rows: n, cols: 1, data }
    }

    /// Row vector.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Mat { rows: 1, cols: n, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Mat::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on {}x{}", self.rows, self.cols);
        self.data[0]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_slice_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Mat) -> Mat {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn add_diag(&mut self, v: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += v;
        }
    }

    pub fn mean_diag(&self) -> f64 {
        let d = self.diag();
        if d.is_empty() {
            0.0
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        }
    }

    pub fn frob_dot(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape(), "frob_dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn symmetrize(&self) -> Mat {
        assert!(self.is_square());
        Mat::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    /// Lower triangle (including the diagonal); the rest set to zero.
    pub fn tril(&self) -> Mat {
        Mat::from_fn(self.rows, self.cols, |i, j| if j <= i { self[(i, j)] } else { 0.0 })
    }

    pub fn slice(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Mat {
        assert!(r0 <= r1 && r1 <= self.rows && c0 <= c1 && c1 <= self.cols, "slice out of range");
        let mut out = Mat::zeros(r1 - r0, c1 - c0);
        for i in r0..r1 {
            out.row_slice_mut(i - r0).copy_from_slice(&self.data[i * self.cols + c0..i * self.cols + c1]);
        }
        out
    }

    pub fn set_slice(&mut self, r0: usize, c0: usize, src: &Mat) {
        assert!(r0 + src.rows <= self.rows && c0 + src.cols <= self.cols, "set_slice out of range");
        for i in 0..src.rows {
            let dst = (r0 + i) * self.cols + c0;
            self.data[dst..dst + src.cols].copy_from_slice(src.row_slice(i));
        }
    }

    pub fn hcat(parts: &[&Mat]) -> Mat {
        let rows = parts.first().map(|m| m.rows).unwrap_or(0);
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            assert_eq!(p.rows, rows, "hcat row mismatch");
            out.set_slice(0, c0, p);
            c0 += p.cols;
        }
        out
    }

    pub fn vcat(parts: &[&Mat]) -> Mat {
        let cols = parts.first().map(|m| m.cols).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "vcat column mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Mat { rows, cols, data }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (k, &i) in idx.iter().enumerate() {
            out.row_slice_mut(k).copy_from_slice(self.row_slice(i));
        }
        out
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        matmul_t(self, false, other, false)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `C = alpha * op(A) op(B) + beta * C`.
pub fn gemm(alpha: f64, a: &Mat, ta: bool, b: &Mat, tb: bool, beta: f64, c: &mut Mat) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.data.iter_mut() {
            *x *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and dimensions describe the owned buffers exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn matmul_t(a: &Mat, ta: bool, b: &Mat, tb: bool) -> Mat {
    let m = if ta { a.cols } else { a.rows };
    let n = if tb { b.rows } else { b.cols };
    let mut c = Mat::zeros(m, n);
    gemm(1.0, a, ta, b, tb, 0.0, &mut c);
    c
}

/// Relative jitter `eps * mean(diag(K))`, the value added to the diagonal of
/// noise-free kernel matrices before factorization.
/// Falls back to `eps` itself when the diagonal is zero (an all-zero kernel).
pub fn relative_jitter(k: &Mat, eps: f64) -> f64 {
    let scale = k.mean_diag().abs();
    if scale > 0.0 {
        eps * scale
    } else {
        eps
    }
}

fn chol_unblocked(a: &mut Mat, off: usize, n: usize) -> Result<()> {
    let ld = a.cols;
    for j in 0..n {
        let jj = off + j;
        let mut d = a.data[jj * ld + jj];
        for k in 0..j {
            let v = a.data[jj * ld + off + k];
            d -= v * v;
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: jj, value: d });
        }
        let d = d.sqrt();
        a.data[jj * ld + jj] = d;
        for i in (j + 1)..n {
            let ii = off + i;
            let mut s = a.data[ii * ld + jj];
            for k in 0..j {
                s -= a.data[ii * ld + off + k] * a.data[jj * ld + off + k];
            }
            a.data[ii * ld + jj] = s / d;
        }
    }
    Ok(())
}

/// Lower Cholesky factor `L` with `A = L L^T`. Only the lower triangle of `A`
/// is read. Fails with [`Error::NotPositiveDefinite`] on a non-positive pivot.
pub fn cholesky(a: &Mat) -> Result<Mat> {
    if !a.is_square() {
        return Err(Error::Shape(format!("cholesky of {}x{}", a.rows, a.cols)));
    }
    let n = a.rows;
    let mut l = a.tril();
    let mut k = 0;
    while k < n {
        let nb = BLOCK.min(n - k);
        chol_unblocked(&mut l, k, nb)?;
        let rest = n - k - nb;
        if rest > 0 {
            // Panel: L21 = A21 L11^{-T}, solved row by row.
            let l11 = l.slice(k, k + nb, k, k + nb);
            let mut panel = l.slice(k + nb, n, k, k + nb);
            // Solve X L11^T = panel  <=>  L11 X^T = panel^T.
            let xt = solve_lower(&l11, &panel.transpose());
            panel = xt.transpose();
            l.set_slice(k + nb, k, &panel);
            // Trailing update: A22 -= L21 L21^T (lower part is all that matters).
            let mut a22 = l.slice(k + nb, n, k + nb, n);
            gemm(-1.0, &panel, false, &panel, true, 1.0, &mut a22);
            l.set_slice(k + nb, k + nb, &a22.tril());
        }
        k += nb;
    }
    Ok(l)
}

/// Cholesky of `A + jitter * I`.
pub fn cholesky_jitter(a: &Mat, jitter: f64) -> Result<Mat> {
    if jitter == 0.0 {
        return cholesky(a);
    }
    let mut b = a.clone();
    b.add_diag(jitter);
    cholesky(&b)
}

/// Solve `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Mat, b: &Mat) -> Mat {
    assert!(l.is_square() && l.rows == b.rows, "solve_lower shape mismatch");
    let n = l.rows;
    let m = b.cols;
    let mut x = b.clone();
    let mut k = 0;
    while k < n {
        let nb = BLOCK.min(n - k);
        if k > 0 {
            let lk = l.slice(k, k + nb, 0, k);
            let xprev = x.slice(0, k, 0, m);
            let mut xb = x.slice(k, k + nb, 0, m);
            gemm(-1.0, &lk, false, &xprev, false, 1.0, &mut xb);
            x.set_slice(k, 0, &xb);
        }
        for i in k..k + nb {
            for kk in k..i {
                let lik = l.data[i * n + kk];
                if lik != 0.0 {
                    for j in 0..m {
                        x.data[i * m + j] -= lik * x.data[kk * m + j];
                    }
                }
            }
            let d = l.data[i * n + i];
            for j in 0..m {
                x.data[i * m + j] /= d;
            }
        }
        k += nb;
    }
    x
}

/// Solve `L^T X = B` for lower-triangular `L`.
pub fn solve_lower_t(l: &Mat, b: &Mat) -> Mat {
    assert!(l.is_square() && l.rows == b.rows, "solve_lower_t shape mismatch");
    let n = l.rows;
    let m = b.cols;
    let mut x = b.clone();
    let mut end = n;
    while end > 0 {
        let nb = BLOCK.min(end);
        let k = end - nb;
        if end < n {
            // rows k..end of L^T, columns end..n  ==  (L[end..n, k..end])^T
            let lk = l.slice(end, n, k, end);
            let xnext = x.slice(end, n, 0, m);
            let mut xb = x.slice(k, end, 0, m);
            gemm(-1.0, &lk, true, &xnext, false, 1.0, &mut xb);
            x.set_slice(k, 0, &xb);
        }
        for i in (k..end).rev() {
            for kk in (i + 1)..end {
                let lki = l.data[kk * n + i];
                if lki != 0.0 {
                    for j in 0..m {
                        x.data[i * m + j] -= lki * x.data[kk * m + j];
                    }
                }
            }
            let d = l.data[i * n + i];
            for j in 0..m {
                x.data[i * m + j] /= d;
            }
        }
        end = k;
    }
    x
}

/// Solve `A X = B` given the Cholesky factor of `A`.
pub fn chol_solve(l: &Mat, b: &Mat) -> Mat {
    solve_lower_t(l, &solve_lower(l, b))
}

pub fn chol_logdet(l: &Mat) -> f64 {
    2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn chol_inverse(l: &Mat) -> Mat {
    let inv = chol_solve(l, &Mat::identity(l.rows));
    inv.symmetrize()
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(a: &Mat) -> Result<Mat> {
    Ok(chol_inverse(&cholesky(a)?))
}
