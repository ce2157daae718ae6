//! Newton systems `H = 2V + Diag(bound weights) + Σ_k w_k·g_k·g_kᵀ` for the
//! interior point iterations.
//!
//! When `V` is diagonal plus low rank, `H` keeps that shape: single-entry
//! rows only touch the diagonal, rows whose off-diagonal entries all go
//! through a few shared "hub" variables add two columns per hub, and any
//! other row adds one column. Everything else falls back to a dense
//! Cholesky factorization.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::OnceCell;

use super::{QpError, QuadOperator, SparseConstraint};
use crate::linalg::{axpy, cholesky_in_place, cholesky_solve, norm_inf, LowRankDiag, Matrix, WoodburySolver};

/// Problems at or below this size always use the dense path.
const SMALL_N: usize = 32;
/// A variable shared by this many multi-entry rows becomes a hub.
const HUB_MIN_ROWS: usize = 3;
const REFINEMENT_STEPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKind {
    Diagonal,
    HubCoupled,
    RankOne,
}

pub(super) struct Newton<'a> {
    quad: &'a dyn QuadOperator,
    quad_lr: Option<LowRankDiag>,
    quad_dense: OnceCell<Matrix>,
    rows: &'a [SparseConstraint],
    kinds: Vec<RowKind>,
    hubs: Vec<usize>,
    hub_slot: Vec<Option<usize>>,
    prefer_dense: bool,
}

pub(super) enum Factor {
    Structured(WoodburySolver),
    Dense(Matrix),
}

pub(super) struct Factored<'n, 'a> {
    newton: &'n Newton<'a>,
    bound_w: Vec<f64>,
    row_w: Vec<f64>,
    factor: Factor,
}

impl<'a> Newton<'a> {
    pub(super) fn new(quad: &'a dyn QuadOperator, rows: &'a [SparseConstraint]) -> Self {
        let n = quad.dim();
        let quad_lr = quad.low_rank();
        let mut uses = vec![0usize; n];
        for r in rows.iter().filter(|r| r.terms.len() > 1) {
            r.terms.iter().for_each(|&(i, _)| uses[i] += 1);
        }
        let hubs: Vec<usize> = (0..n).filter(|&i| uses[i] >= HUB_MIN_ROWS).collect();
        let mut hub_slot = vec![None; n];
        for (k, &h) in hubs.iter().enumerate() {
            hub_slot[h] = Some(k);
        }
        let kinds: Vec<RowKind> = rows
            .iter()
            .map(|r| {
                if r.terms.len() <= 1 {
                    RowKind::Diagonal
                } else if r.terms.iter().filter(|(i, _)| hub_slot[*i].is_none()).count() <= 1 {
                    RowKind::HubCoupled
                } else {
                    RowKind::RankOne
                }
            })
            .collect();
        let rank = quad_lr.as_ref().map_or(n, |lr| lr.rank())
            + kinds.iter().filter(|k| **k == RowKind::RankOne).count()
            + 2 * hubs.len();
        let prefer_dense = quad_lr.is_none() || n <= SMALL_N || 2 * rank >= n;
        Self { quad, quad_lr, quad_dense: OnceCell::new(), rows, kinds, hubs, hub_slot, prefer_dense }
    }

    fn dense_quad(&self) -> &Matrix {
        self.quad_dense.get_or_init(|| self.quad.to_dense())
    }

    pub(super) fn factor<'n>(&'n self, bound_w: Vec<f64>, row_w: Vec<f64>) -> Result<Factored<'n, 'a>, QpError> {
        let factor = if self.prefer_dense {
            self.factor_dense(&bound_w, &row_w)?
        } else {
            match self.factor_structured(&bound_w, &row_w) {
                Some(f) => f,
                None => self.factor_dense(&bound_w, &row_w)?,
            }
        };
        Ok(Factored { newton: self, bound_w, row_w, factor })
    }

    fn factor_structured(&self, bound_w: &[f64], row_w: &[f64]) -> Option<Factor> {
        let lr = self.quad_lr.as_ref()?;
        let n = lr.dim();
        let mut diag: Vec<f64> = lr.diag.iter().zip(bound_w).map(|(d, b)| 2.0 * d + b).collect();
        let mut hub_cols = vec![vec![0.0; n]; self.hubs.len()];
        let mut rank_one = Vec::new();
        for ((row, kind), &w) in self.rows.iter().zip(&self.kinds).zip(row_w) {
            match kind {
                RowKind::Diagonal => row.terms.iter().for_each(|&(i, g)| diag[i] += w * g * g),
                RowKind::HubCoupled => {
                    for (a, &(i, gi)) in row.terms.iter().enumerate() {
                        diag[i] += w * gi * gi;
                        for &(j, gj) in &row.terms[a + 1..] {
                            // each unordered pair lands in exactly one hub column
                            let (hub, other) = match (self.hub_slot[i], self.hub_slot[j]) {
                                (Some(si), Some(sj)) => (si.min(sj), if si < sj { j } else { i }),
                                (Some(si), None) => (si, j),
                                (None, Some(sj)) => (sj, i),
                                (None, None) => unreachable!("hub-coupled row with two plain entries"),
                            };
                            hub_cols[hub][other] += w * gi * gj;
                        }
                    }
                }
                RowKind::RankOne => {
                    let s = libm::sqrt(w);
                    let mut col = vec![0.0; n];
                    row.terms.iter().for_each(|&(i, g)| col[i] += s * g);
                    rank_one.push(col);
                }
            }
        }
        let mut op = LowRankDiag::diagonal(diag);
        let k = lr.rank();
        op.push_block(lr.cols.clone(), &lr.coef.iter().map(|c| 2.0 * c).collect::<Vec<_>>());
        debug_assert_eq!(op.rank(), k);
        if !rank_one.is_empty() {
            let r = rank_one.len();
            let mut eye = vec![0.0; r * r];
            (0..r).for_each(|i| eye[i * r + i] = 1.0);
            op.push_block(rank_one, &eye);
        }
        for (slot, col) in hub_cols.into_iter().enumerate() {
            let mut e = vec![0.0; n];
            e[self.hubs[slot]] = 1.0;
            op.push_block(vec![col, e], &[0.0, 1.0, 1.0, 0.0]);
        }
        WoodburySolver::new(op).ok().map(Factor::Structured)
    }

    fn factor_dense(&self, bound_w: &[f64], row_w: &[f64]) -> Result<Factor, QpError> {
        let mut h = self.dense_quad().clone();
        h.scale(2.0);
        let n = h.rows();
        for (i, b) in bound_w.iter().enumerate() {
            h[(i, i)] += b;
        }
        for (row, &w) in self.rows.iter().zip(row_w) {
            for &(i, gi) in &row.terms {
                for &(j, gj) in &row.terms {
                    h[(i, j)] += w * gi * gj;
                }
            }
        }
        let scale = (0..n).fold(0.0f64, |m, i| m.max(libm::fabs(h[(i, i)]))).max(1e-300);
        let mut reg = 0.0;
        for _ in 0..8 {
            let mut l = h.clone();
            for i in 0..n {
                l[(i, i)] += reg;
            }
            if cholesky_in_place(&mut l).is_ok() {
                return Ok(Factor::Dense(l));
            }
            reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
        }
        Err(QpError::Numerical)
    }
}

impl Factored<'_, '_> {
    /// Exact `H·x`, used for iterative refinement.
    pub(super) fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.newton.quad.apply(x, out);
        for ((o, b), xi) in out.iter_mut().zip(&self.bound_w).zip(x) {
            *o = 2.0 * *o + b * xi;
        }
        for (row, &w) in self.newton.rows.iter().zip(&self.row_w) {
            let gx = w * row.eval(x);
            if gx != 0.0 {
                row.terms.iter().for_each(|&(i, g)| out[i] += gx * g);
            }
        }
    }

    fn raw_solve(&self, b: &[f64]) -> Vec<f64> {
        match &self.factor {
            Factor::Structured(w) => w.solve(b),
            Factor::Dense(l) => {
                let mut x = b.to_vec();
                cholesky_solve(l, &mut x);
                x
            }
        }
    }

    pub(super) fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = self.raw_solve(b);
        let target = 1e-15 * norm_inf(b).max(f64::MIN_POSITIVE);
        let mut hx = vec![0.0; b.len()];
        let mut last = f64::INFINITY;
        for _ in 0..REFINEMENT_STEPS {
            self.apply(&x, &mut hx);
            let r: Vec<f64> = b.iter().zip(&hx).map(|(a, c)| a - c).collect();
            let rn = norm_inf(&r);
            if rn <= target || !(rn < last) {
                break;
            }
            last = rn;
            let dx = self.raw_solve(&r);
            axpy(1.0, &dx, &mut x);
        }
        x
    }

    #[cfg(test)]
    pub(super) fn is_structured(&self) -> bool {
        matches!(self.factor, Factor::Structured(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Diagonal plus rank-2 operator large enough to take the structured path.
    fn operator(n: usize) -> LowRankDiag {
        let mut op = LowRankDiag::diagonal((0..n).map(|i| 0.01 + 0.001 * (i % 7) as f64).collect());
        op.push_block(
            vec![(0..n).map(|i| 0.5 + 0.01 * i as f64).collect(), (0..n).map(|i| libm::sin(i as f64)).collect()],
            &[0.003, 0.0, 0.0, 0.001],
        );
        op
    }

    fn check_against_dense(quad: &LowRankDiag, rows: &[SparseConstraint], expect_structured: bool) {
        let n = quad.dim();
        let newton = Newton::new(quad, rows);
        let bound_w: Vec<f64> = (0..n).map(|i| 1e-3 * (1.0 + i as f64)).collect();
        let row_w: Vec<f64> = (0..rows.len()).map(|k| 0.5 + k as f64 * 1e-2).collect();
        let f = newton.factor(bound_w.clone(), row_w.clone()).unwrap();
        assert_eq!(f.is_structured(), expect_structured);

        let mut h = quad.to_dense();
        h.scale(2.0);
        for i in 0..n {
            h[(i, i)] += bound_w[i];
        }
        for (row, w) in rows.iter().zip(&row_w) {
            let mut g = vec![0.0; n];
            row.terms.iter().for_each(|&(i, v)| g[i] = v);
            for i in 0..n {
                for j in 0..n {
                    h[(i, j)] += w * g[i] * g[j];
                }
            }
        }
        let b: Vec<f64> = (0..n).map(|i| libm::cos(i as f64)).collect();
        let x = f.solve(&b);
        let back = h.matvec(&x);
        for (u, v) in back.iter().zip(&b) {
            assert_relative_eq!(*u, *v, epsilon = 1e-10);
        }
    }

    #[test]
    fn hub_rows_stay_structured() {
        // z_i - u·K <= 0 for every i, with K the last variable
        let n = 60;
        let quad = operator(n);
        let padded = LowRankDiag {
            diag: { let mut d = quad.diag.clone(); d.push(0.0); d },
            cols: quad.cols.iter().map(|c| { let mut c = c.clone(); c.push(0.0); c }).collect(),
            coef: quad.coef.clone(),
        };
        let rows: Vec<SparseConstraint> =
            (0..n).map(|i| SparseConstraint { terms: vec![(i, 1.0), (n, -0.05)], rhs: 0.0 }).collect();
        check_against_dense(&padded, &rows, true);
    }

    #[test]
    fn generic_rows_become_rank_one_columns() {
        let n = 80;
        let quad = operator(n);
        let rows = vec![
            SparseConstraint::from_dense(&(0..n).map(|i| (i % 3) as f64).collect::<Vec<_>>(), 1.0),
            SparseConstraint { terms: vec![(4, 2.0)], rhs: 1.0 },
        ];
        check_against_dense(&quad, &rows, true);
    }

    #[test]
    fn small_problems_are_dense() {
        let quad = operator(5);
        let rows = vec![SparseConstraint { terms: vec![(0, 1.0), (1, 1.0)], rhs: 1.0 }];
        check_against_dense(&quad, &rows, false);
    }
}
