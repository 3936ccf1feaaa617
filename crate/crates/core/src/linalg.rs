//! Minimal dense linear algebra.
//!
//! Row-major matrices over `f32` (model weights and activations) and `f64`
//! (solver internals). The factorizations here are sized for hidden
//! dimensions in the tens-to-hundreds range, not for large-scale BLAS work.

use num_traits::Float;

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Float> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows * cols");
        Mat { rows, cols, data }
    }

    /// Builds a matrix from a row-major closure.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat<T> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * other`, shapes `[m x k] * [k x n] -> [m x n]`.
    pub fn matmul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    /// Gram matrix `selfᵀ * self`, shape `[cols x cols]`.
    pub fn gram(&self) -> Mat<T> {
        let mut out = Mat::zeros(self.cols, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..self.cols {
                let xi = row[i];
                let out_row = &mut out.data[i * self.cols..(i + 1) * self.cols];
                for (o, &xj) in out_row.iter_mut().zip(row.iter()) {
                    *o = *o + xi * xj;
                }
            }
        }
        out
    }

    /// `selfᵀ * other`, shape `[self.cols x other.cols]`.
    pub fn transpose_matmul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.rows, other.rows, "transpose_matmul row mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    pub fn sub(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn add(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: T) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Mat<T>) -> T {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    pub fn frobenius_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Mat<f32> {
    pub fn to_f64(&self) -> Mat<f64> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

impl Mat<f64> {
    pub fn to_f32(&self) -> Mat<f32> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Stacks matrices with equal column counts on top of each other.
pub fn vstack<T: Float>(parts: &[&Mat<T>]) -> Mat<T> {
    assert!(!parts.is_empty());
    let cols = parts[0].cols;
    let rows = parts.iter().map(|p| p.rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        assert_eq!(p.cols, cols, "vstack column mismatch");
        data.extend_from_slice(&p.data);
    }
    Mat { rows, cols, data }
}

/// Cholesky factorization of a symmetric positive definite matrix.
///
/// Returns the lower-triangular factor `L` with `A = L Lᵀ`, or an error when
/// a pivot is not strictly positive.
pub fn cholesky(a: &Mat<f64>) -> Result<Mat<f64>> {
    let n = a.rows();
    assert_eq!(a.cols(), n, "cholesky needs a square matrix");
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Degenerate(format!(
                        "matrix is not positive definite (pivot {sum:.3e} at {i})"
                    )));
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves `A X = B` for symmetric positive definite `A` via Cholesky.
pub fn solve_spd(a: &Mat<f64>, b: &Mat<f64>) -> Result<Mat<f64>> {
    let l = cholesky(a)?;
    let n = a.rows();
    assert_eq!(b.rows(), n, "rhs row mismatch");
    let mut x = b.clone();
    // Forward substitution: L Z = B.
    for col in 0..x.cols() {
        for i in 0..n {
            let mut v = x.get(i, col);
            for k in 0..i {
                v -= l.get(i, k) * x.get(k, col);
            }
            x.set(i, col, v / l.get(i, i));
        }
        // Back substitution: Lᵀ X = Z.
        for i in (0..n).rev() {
            let mut v = x.get(i, col);
            for k in i + 1..n {
                v -= l.get(k, i) * x.get(k, col);
            }
            x.set(i, col, v / l.get(i, i));
        }
    }
    Ok(x)
}

/// Solves `A X = B` for a general square `A` by LU with partial pivoting.
pub fn solve_general(a: &Mat<f64>, b: &Mat<f64>) -> Result<Mat<f64>> {
    let n = a.rows();
    assert_eq!(a.cols(), n, "solve_general needs a square matrix");
    assert_eq!(b.rows(), n, "rhs row mismatch");
    let mut lu = a.clone();
    let mut x = b.clone();
    let mut perm: Vec<usize> = (0..n).collect();

    for col in 0..n {
        let mut pivot = col;
        let mut best = lu.get(col, col).abs();
        for r in col + 1..n {
            let v = lu.get(r, col).abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return Err(Error::Degenerate("matrix is singular".into()));
        }
        if pivot != col {
            for c in 0..n {
                let tmp = lu.get(col, c);
                lu.set(col, c, lu.get(pivot, c));
                lu.set(pivot, c, tmp);
            }
            perm.swap(col, pivot);
        }
        for r in col + 1..n {
            let f = lu.get(r, col) / lu.get(col, col);
            lu.set(r, col, f);
            for c in col + 1..n {
                let v = lu.get(r, c) - f * lu.get(col, c);
                lu.set(r, c, v);
            }
        }
    }

    let permuted = Mat::from_fn(n, x.cols(), |r, c| x.get(perm[r], c));
    x = permuted;
    for col in 0..x.cols() {
        for i in 0..n {
            let mut v = x.get(i, col);
            for k in 0..i {
                v -= lu.get(i, k) * x.get(k, col);
            }
            x.set(i, col, v);
        }
        for i in (0..n).rev() {
            let mut v = x.get(i, col);
            for k in i + 1..n {
                v -= lu.get(i, k) * x.get(k, col);
            }
            x.set(i, col, v / lu.get(i, i));
        }
    }
    Ok(x)
}

/// Inverse of a general square matrix.
pub fn inverse(a: &Mat<f64>) -> Result<Mat<f64>> {
    solve_general(a, &Mat::identity(a.rows()))
}

/// Singular value decomposition `A = U diag(s) Vᵀ` via one-sided Jacobi
/// rotations. `A` is `m x n` with `m >= n`; `U` is `m x n` with orthonormal
/// columns, `V` is `n x n` orthogonal, and `s` is sorted descending.
pub fn svd(a: &Mat<f64>) -> Result<Svd> {
    let (m, n) = (a.rows(), a.cols());
    assert!(m >= n, "svd expects rows >= cols");
    let mut b = a.clone();
    let mut v = Mat::identity(n);

    let tol = 1e-14;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for r in 0..m {
                    let bp = b.get(r, p);
                    let bq = b.get(r, q);
                    app += bp * bp;
                    aqq += bq * bq;
                    apq += bp * bq;
                }
                if !apq.is_finite() || !app.is_finite() || !aqq.is_finite() {
                    return Err(Error::Degenerate("svd input is not finite".into()));
                }
                if apq.abs() <= tol * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let bp = b.get(r, p);
                    let bq = b.get(r, q);
                    b.set(r, p, c * bp - s * bq);
                    b.set(r, q, s * bp + c * bq);
                }
                for r in 0..n {
                    let vp = v.get(r, p);
                    let vq = v.get(r, q);
                    v.set(r, p, c * vp - s * vq);
                    v.set(r, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|c| (0..m).map(|r| b.get(r, c).powi(2)).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut u = Mat::zeros(m, n);
    let mut singular = Vec::with_capacity(n);
    let mut v_sorted = Mat::zeros(n, n);
    let scale = norms.iter().cloned().fold(0.0_f64, f64::max);
    let rank_tol = scale * 1e-13;
    let mut deficient = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        singular.push(norms[src]);
        for r in 0..n {
            v_sorted.set(r, dst, v.get(r, src));
        }
        if norms[src] > rank_tol && norms[src] > 0.0 {
            for r in 0..m {
                u.set(r, dst, b.get(r, src) / norms[src]);
            }
        } else {
            deficient.push(dst);
        }
    }

    // Complete U to orthonormal columns when the input is rank deficient so
    // downstream products like U Vᵀ stay orthogonal.
    for &col in &deficient {
        let mut filled = false;
        for basis in 0..m {
            let mut cand = vec![0.0; m];
            cand[basis] = 1.0;
            for c in 0..n {
                if deficient.contains(&c) && c >= col {
                    continue;
                }
                let dot: f64 = (0..m).map(|r| u.get(r, c) * cand[r]).sum();
                for (r, cv) in cand.iter_mut().enumerate() {
                    *cv -= dot * u.get(r, c);
                }
            }
            let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for (r, cv) in cand.iter().enumerate() {
                    u.set(r, col, cv / norm);
                }
                filled = true;
                break;
            }
        }
        if !filled {
            return Err(Error::Degenerate(
                "failed to complete orthonormal basis in svd".into(),
            ));
        }
    }

    Ok(Svd {
        u,
        singular_values: singular,
        v: v_sorted,
    })
}

/// Result of [`svd`].
pub struct Svd {
    pub u: Mat<f64>,
    pub singular_values: Vec<f64>,
    pub v: Mat<f64>,
}

impl Svd {
    /// Ratio of largest to smallest singular value; infinite when the
    /// smallest is zero.
    pub fn condition(&self) -> f64 {
        let max = self.singular_values.first().copied().unwrap_or(0.0);
        let min = self.singular_values.last().copied().unwrap_or(0.0);
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}
