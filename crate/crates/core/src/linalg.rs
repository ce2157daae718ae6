//! Small dense linear algebra used by the estimators and solvers.
//!
//! Everything here is row-major `f64`. Only the eigen-decomposition is
//! delegated to nalgebra; the rest is simple enough to keep local and
//! allocation-free in the hot loops.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is singular at pivot {0}")]
    Singular(usize),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    /// `out = self * x`.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.matvec(x))
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| f64::max(m, libm::fabs(a - b)))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in 0..i {
                if libm::fabs(self[(i, j)] - self[(j, i)]) > tol {
                    return false;
                }
            }
        }
        true
    }

    /// Eigenvalues of a symmetric matrix in ascending order.
    pub fn symmetric_eigenvalues(&self) -> Vec<f64> {
        let m = nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data);
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Raises every eigenvalue of a symmetric matrix to at least `floor`.
    ///
    /// Returns `true` if any eigenvalue was changed; the matrix is left
    /// untouched otherwise.
    pub fn clip_eigenvalues(&mut self, floor: f64) -> bool {
        let n = self.rows;
        let m = nalgebra::DMatrix::from_row_slice(n, n, &self.data);
        let eig = nalgebra::SymmetricEigen::new(m);
        if eig.eigenvalues.iter().all(|&l| l >= floor) {
            return false;
        }
        let clipped = eig.eigenvalues.map(|l| l.max(floor));
        let q = &eig.eigenvectors;
        let rebuilt = q * nalgebra::DMatrix::from_diagonal(&clipped) * q.transpose();
        for i in 0..n {
            for j in 0..n {
                // average the two triangles so the result is exactly symmetric
                self[(i, j)] = 0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)]);
            }
        }
        true
    }
}

impl core::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// y += a * x
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| f64::max(m, libm::fabs(*v)))
}

/// In-place lower Cholesky factor of a symmetric positive definite matrix.
///
/// Only the lower triangle of the input is read; on success it holds `L`.
pub fn cholesky_in_place(a: &mut Matrix) -> Result<(), LinalgError> {
    let n = a.rows;
    for i in 0..n {
        let (head, tail) = a.data.split_at_mut(i * n);
        let row_i = &mut tail[..n];
        for j in 0..i {
            let row_j = &head[j * n..j * n + j + 1];
            let s = row_i[j] - dot(&row_i[..j], &row_j[..j]);
            row_i[j] = s / row_j[j];
        }
        let d = row_i[i] - dot(&row_i[..i], &row_i[..i]);
        if !(d > 0.0) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: i, value: d });
        }
        row_i[i] = libm::sqrt(d);
        row_i[i + 1..].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(())
}

/// Solves `L Lᵀ x = b` given the factor from [`cholesky_in_place`].
pub fn cholesky_solve(l: &Matrix, b: &mut [f64]) {
    let n = l.rows;
    for i in 0..n {
        let s = b[i] - dot(&l.row(i)[..i], &b[..i]);
        b[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// LU factorization with partial pivoting for small square systems.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(n: usize, mut a: Vec<f64>) -> Result<Self, LinalgError> {
        assert_eq!(a.len(), n * n);
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.iter().fold(0.0f64, |m, v| m.max(libm::fabs(*v))).max(f64::MIN_POSITIVE);
        for k in 0..n {
            let (p, pv) = (k..n)
                .map(|i| (i, libm::fabs(a[i * n + k])))
                .fold((k, -1.0), |best, c| if c.1 > best.1 { c } else { best });
            if pv <= 1e-300 * scale {
                return Err(LinalgError::Singular(k));
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let piv = a[k * n + k];
            for i in (k + 1)..n {
                let f = a[i * n + k] / piv;
                a[i * n + k] = f;
                if f != 0.0 {
                    for j in (k + 1)..n {
                        a[i * n + j] -= f * a[k * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu: a, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s = dot(&self.lu[i * n..i * n + i], &x[..i]);
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s = dot(&self.lu[i * n + i + 1..i * n + n], &x[i + 1..]);
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        x
    }
}

/// `Diag(diag) + U · C · Uᵀ` with `U` stored as `k` columns of length `n`
/// and `C` a dense symmetric `k × k` coefficient block.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankDiag {
    pub diag: Vec<f64>,
    pub cols: Vec<Vec<f64>>,
    /// Row-major `k × k`.
    pub coef: Vec<f64>,
}

impl LowRankDiag {
    pub fn diagonal(diag: Vec<f64>) -> Self {
        Self { diag, cols: Vec::new(), coef: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn rank(&self) -> usize {
        self.cols.len()
    }

    /// Appends columns with a block-diagonal coefficient block.
    pub fn push_block(&mut self, cols: Vec<Vec<f64>>, block: &[f64]) {
        let k0 = self.cols.len();
        let kb = cols.len();
        assert_eq!(block.len(), kb * kb);
        let k = k0 + kb;
        let mut coef = vec![0.0; k * k];
        for i in 0..k0 {
            coef[i * k..i * k + k0].copy_from_slice(&self.coef[i * k0..(i + 1) * k0]);
        }
        for i in 0..kb {
            for j in 0..kb {
                coef[(k0 + i) * k + k0 + j] = block[i * kb + j];
            }
        }
        self.coef = coef;
        self.cols.extend(cols);
    }

    /// Diagonal of the full operator.
    pub fn full_diagonal(&self) -> Vec<f64> {
        let k = self.rank();
        let mut out = self.diag.clone();
        for a in 0..k {
            for b in 0..k {
                let c = self.coef[a * k + b];
                if c != 0.0 {
                    for ((o, ua), ub) in out.iter_mut().zip(&self.cols[a]).zip(&self.cols[b]) {
                        *o += c * ua * ub;
                    }
                }
            }
        }
        out
    }

    /// Strict positive definiteness, decided in `O(n·k² + k³)`.
    ///
    /// With `D > 0` and `Ũ = D^{-1/2}U`, the operator is positive definite
    /// iff every eigenvalue of `G^{1/2} C G^{1/2}` exceeds `−1`, where
    /// `G = ŨᵀŨ`. `margin` is the required distance from `−1`.
    pub fn is_positive_definite(&self, margin: f64) -> bool {
        if self.diag.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return false;
        }
        let k = self.rank();
        if k == 0 {
            return true;
        }
        let mut g = nalgebra::DMatrix::<f64>::zeros(k, k);
        for a in 0..k {
            for b in a..k {
                let v: f64 = self.cols[a].iter().zip(&self.cols[b]).zip(&self.diag).map(|((x, y), d)| x * y / d).sum();
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        let eig = nalgebra::SymmetricEigen::new(g);
        let root = eig.eigenvalues.map(|l| libm::sqrt(l.max(0.0)));
        let q = &eig.eigenvectors;
        let g_half = q * nalgebra::DMatrix::from_diagonal(&root) * q.transpose();
        let c = nalgebra::DMatrix::from_row_slice(k, k, &self.coef);
        let mut m = &g_half * c * &g_half;
        m = 0.5 * (&m + m.transpose());
        m.symmetric_eigenvalues().iter().all(|&l| l > -1.0 + margin)
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, d), xi) in out.iter_mut().zip(&self.diag).zip(x) {
            *o = d * xi;
        }
        let k = self.rank();
        if k == 0 {
            return;
        }
        let proj: Vec<f64> = self.cols.iter().map(|c| dot(c, x)).collect();
        for (a, col) in self.cols.iter().enumerate() {
            let s = dot(&self.coef[a * k..(a + 1) * k], &proj);
            if s != 0.0 {
                axpy(s, col, out);
            }
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.dim();
        let k = self.rank();
        let mut m = Matrix::from_diag(&self.diag);
        for a in 0..k {
            for b in 0..k {
                let c = self.coef[a * k + b];
                if c == 0.0 {
                    continue;
                }
                let (ua, ub) = (&self.cols[a], &self.cols[b]);
                for i in 0..n {
                    let s = c * ua[i];
                    if s != 0.0 {
                        axpy(s, ub, m.row_mut(i));
                    }
                }
            }
        }
        // the two triangles accumulate in different orders
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }
}

/// Factored solver for `Diag(d) + U C Uᵀ` using the push-through form of
/// the Woodbury identity, which does not need `C` to be invertible:
/// `(D + U C Uᵀ)⁻¹ = D⁻¹ − D⁻¹ U (I + C Uᵀ D⁻¹ U)⁻¹ C Uᵀ D⁻¹`.
#[derive(Debug, Clone)]
pub struct WoodburySolver {
    op: LowRankDiag,
    dinv: Vec<f64>,
    cap: Option<Lu>,
}

impl WoodburySolver {
    /// Requires every diagonal entry to be strictly positive.
    pub fn new(op: LowRankDiag) -> Result<Self, LinalgError> {
        let mut dinv = Vec::with_capacity(op.dim());
        for (i, &d) in op.diag.iter().enumerate() {
            if !(d > 0.0) || !d.is_finite() {
                return Err(LinalgError::NotPositiveDefinite { pivot: i, value: d });
            }
            dinv.push(1.0 / d);
        }
        let k = op.rank();
        let cap = if k == 0 {
            None
        } else {
            // G = Uᵀ D⁻¹ U
            let scaled: Vec<Vec<f64>> = op
                .cols
                .iter()
                .map(|c| c.iter().zip(&dinv).map(|(a, b)| a * b).collect())
                .collect();
            let mut g = vec![0.0; k * k];
            for a in 0..k {
                for b in a..k {
                    let v = dot(&scaled[a], &op.cols[b]);
                    g[a * k + b] = v;
                    g[b * k + a] = v;
                }
            }
            let mut m = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    let mut s = if i == j { 1.0 } else { 0.0 };
                    for l in 0..k {
                        s += op.coef[i * k + l] * g[l * k + j];
                    }
                    m[i * k + j] = s;
                }
            }
            Some(Lu::factor(k, m)?)
        };
        Ok(Self { op, dinv, cap })
    }

    pub fn operator(&self) -> &LowRankDiag {
        &self.op
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = b.iter().zip(&self.dinv).map(|(a, d)| a * d).collect();
        if let Some(cap) = &self.cap {
            let k = self.op.rank();
            let proj: Vec<f64> = self.op.cols.iter().map(|c| dot(c, &y)).collect();
            let cproj: Vec<f64> = (0..k).map(|i| dot(&self.op.coef[i * k..(i + 1) * k], &proj)).collect();
            let t = cap.solve(&cproj);
            for (a, col) in self.op.cols.iter().enumerate() {
                if t[a] != 0.0 {
                    for ((yi, ci), di) in y.iter_mut().zip(col).zip(&self.dinv) {
                        *yi -= t[a] * ci * di;
                    }
                }
            }
        }
        y
    }
}
