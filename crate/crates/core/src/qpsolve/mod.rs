//! Convex solvers for the portfolio programs.
//!
//! [`solve_qp`] is a primal-dual interior point method (Mehrotra
//! predictor-corrector) for
//!
//! ```text
//!     minimize    xᵀVx + cᵀx
//!     subject to  a_k·x  = b_k
//!                 g_k·x <= h_k
//!                 lower <= x <= upper
//! ```
//!
//! It never forms `V` when the operator exposes a diagonal-plus-low-rank
//! structure; Newton systems are then solved with the Woodbury identity in
//! `O(n·k²)`. [`solve_quad_log`] minimizes `½yᵀVy − Σ log y_i` over
//! `0 < y <= d` with a projected Newton method.

mod ipm;
mod newton;
mod quadlog;

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::linalg::{LowRankDiag, Matrix};
use crate::riskmodels::RiskModel;

pub use ipm::solve_qp;
pub use quadlog::{solve_quad_log, QuadLogSolution};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITERATIONS: usize = 50_000;

/// A symmetric linear operator `x ↦ V·x`.
pub trait QuadOperator {
    fn dim(&self) -> usize;

    fn apply(&self, x: &[f64], out: &mut [f64]);

    /// `Diag + U·C·Uᵀ` form, when available.
    fn low_rank(&self) -> Option<LowRankDiag> {
        None
    }

    fn to_dense(&self) -> Matrix {
        let n = self.dim();
        let mut m = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            self.apply(&e, &mut col);
            for i in 0..n {
                m[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        m
    }
}

impl QuadOperator for Matrix {
    fn dim(&self) -> usize {
        self.rows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.matvec_into(x, out)
    }

    fn to_dense(&self) -> Matrix {
        self.clone()
    }
}

impl QuadOperator for LowRankDiag {
    fn dim(&self) -> usize {
        LowRankDiag::dim(self)
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.apply_into(x, out)
    }

    fn low_rank(&self) -> Option<LowRankDiag> {
        Some(self.clone())
    }
}

impl QuadOperator for RiskModel {
    fn dim(&self) -> usize {
        RiskModel::dim(self)
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.cov_matvec_into(x, out)
    }

    fn low_rank(&self) -> Option<LowRankDiag> {
        RiskModel::low_rank(self)
    }

    fn to_dense(&self) -> Matrix {
        self.materialize(usize::MAX).expect("uncapped")
    }
}

/// `factor·op`.
pub struct Scaled<'a> {
    pub inner: &'a dyn QuadOperator,
    pub factor: f64,
}

impl QuadOperator for Scaled<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.inner.apply(x, out);
        out.iter_mut().for_each(|v| *v *= self.factor);
    }

    fn low_rank(&self) -> Option<LowRankDiag> {
        let mut lr = self.inner.low_rank()?;
        lr.diag.iter_mut().for_each(|v| *v *= self.factor);
        lr.coef.iter_mut().for_each(|v| *v *= self.factor);
        Some(lr)
    }

    fn to_dense(&self) -> Matrix {
        let mut m = self.inner.to_dense();
        m.scale(self.factor);
        m
    }
}

/// `op` padded with zero rows and columns up to dimension `dim`.
pub struct Padded<'a> {
    pub inner: &'a dyn QuadOperator,
    pub dim: usize,
}

impl QuadOperator for Padded<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.inner.dim();
        self.inner.apply(&x[..n], &mut out[..n]);
        out[n..].iter_mut().for_each(|v| *v = 0.0);
    }

    fn low_rank(&self) -> Option<LowRankDiag> {
        let mut lr = self.inner.low_rank()?;
        lr.diag.resize(self.dim, 0.0);
        lr.cols.iter_mut().for_each(|c| c.resize(self.dim, 0.0));
        Some(lr)
    }

    fn to_dense(&self) -> Matrix {
        let n = self.inner.dim();
        let inner = self.inner.to_dense();
        let mut m = Matrix::zeros(self.dim, self.dim);
        for i in 0..n {
            m.row_mut(i)[..n].copy_from_slice(inner.row(i));
        }
        m
    }
}

/// `a·x = rhs` with a dense coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

/// `g·x <= rhs` with the nonzero coefficients of `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConstraint {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl SparseConstraint {
    pub fn from_dense(g: &[f64], rhs: f64) -> Self {
        Self { terms: g.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).collect(), rhs }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, v)| v * x[i]).sum()
    }
}

pub struct QpProblem<'a> {
    pub quadratic: &'a dyn QuadOperator,
    pub linear: Vec<f64>,
    pub eq: Vec<LinearConstraint>,
    pub ineq: Vec<SparseConstraint>,
    /// `f64::NEG_INFINITY` for no bound.
    pub lower: Vec<f64>,
    /// `f64::INFINITY` for no bound.
    pub upper: Vec<f64>,
}

impl<'a> QpProblem<'a> {
    /// No linear term, no constraints, unbounded.
    pub fn new(quadratic: &'a dyn QuadOperator) -> Self {
        let n = quadratic.dim();
        Self {
            quadratic,
            linear: vec![0.0; n],
            eq: Vec::new(),
            ineq: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.quadratic.dim()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut vx = vec![0.0; x.len()];
        self.quadratic.apply(x, &mut vx);
        crate::linalg::dot(x, &vx) + crate::linalg::dot(&self.linear, x)
    }

    /// Largest violation of any constraint at `x`.
    pub fn primal_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for c in &self.eq {
            worst = worst.max(libm::fabs(crate::linalg::dot(&c.coeffs, x) - c.rhs));
        }
        for c in &self.ineq {
            worst = worst.max(c.eval(x) - c.rhs);
        }
        for ((xi, l), u) in x.iter().zip(&self.lower).zip(&self.upper) {
            worst = worst.max(l - xi).max(xi - u);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Bound on the KKT residual for an optimal status.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Record one [`IterationTrace`] per iteration.
    pub trace: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tolerance: DEFAULT_TOLERANCE, max_iterations: DEFAULT_MAX_ITERATIONS, trace: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationTrace {
    pub iteration: usize,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub complementarity: f64,
    pub mu: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Max of primal infeasibility, dual infeasibility and complementarity.
    pub kkt_residual: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub trace: Vec<IterationTrace>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch { what: &'static str, expected: usize, actual: usize },
    #[error("lower bound exceeds upper bound at {0}")]
    InvertedBounds(usize),
    #[error("invalid solver setting: {0}")]
    InvalidSettings(&'static str),
    #[error("non-finite problem data in {0}")]
    NonFinite(&'static str),
    #[error("newton system could not be factored")]
    Numerical,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadLogError {
    #[error("quadratic term is not positive definite (curvature {curvature:e} along a search direction)")]
    NotPositiveDefinite { curvature: f64 },
    #[error("upper bound must be positive, got {0}")]
    InvalidUpper(f64),
    #[error("invalid solver setting: {0}")]
    InvalidSettings(&'static str),
    #[error("no convergence after {iterations} iterations (stationarity residual {residual:e})")]
    MaxIterations { iterations: usize, residual: f64 },
}
