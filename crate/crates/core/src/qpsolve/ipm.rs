use alloc::vec;
use alloc::vec::Vec;

use super::newton::{Factored, Newton};
use super::{IterationTrace, QpError, QpProblem, QpSolution, QpStatus, SolverSettings, SparseConstraint};
use crate::linalg::{dot, norm_inf, Lu};

/// Fraction of the distance to the boundary taken by each step.
const STEP_FRACTION: f64 = 0.99;
/// Dual magnitude at which a Farkas certificate is checked.
const FARKAS_TRIGGER: f64 = 1e6;
const FARKAS_TOL: f64 = 1e-7;
/// Iterations without progress on the KKT residual before giving up.
const STALL_LIMIT: usize = 60;

fn validate(problem: &QpProblem<'_>, settings: &SolverSettings) -> Result<(), QpError> {
    let n = problem.dim();
    let check_len = |what, actual| {
        if actual == n {
            Ok(())
        } else {
            Err(QpError::DimensionMismatch { what, expected: n, actual })
        }
    };
    check_len("linear term", problem.linear.len())?;
    check_len("lower bounds", problem.lower.len())?;
    check_len("upper bounds", problem.upper.len())?;
    if !(settings.tolerance > 0.0) || !settings.tolerance.is_finite() {
        return Err(QpError::InvalidSettings("tolerance must be positive and finite"));
    }
    if settings.max_iterations == 0 {
        return Err(QpError::InvalidSettings("max_iterations must be at least 1"));
    }
    if problem.linear.iter().any(|v| !v.is_finite()) {
        return Err(QpError::NonFinite("linear term"));
    }
    for c in &problem.eq {
        check_len("equality row", c.coeffs.len())?;
        if !c.rhs.is_finite() || c.coeffs.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("equality row"));
        }
    }
    for c in &problem.ineq {
        if let Some(&(i, _)) = c.terms.iter().find(|(i, _)| *i >= n) {
            return Err(QpError::DimensionMismatch { what: "inequality term index", expected: n, actual: i });
        }
        if !c.rhs.is_finite() || c.terms.iter().any(|(_, v)| !v.is_finite()) {
            return Err(QpError::NonFinite("inequality row"));
        }
    }
    for i in 0..n {
        let (l, u) = (problem.lower[i], problem.upper[i]);
        if l.is_nan() || u.is_nan() || l == f64::INFINITY || u == f64::NEG_INFINITY {
            return Err(QpError::NonFinite("bounds"));
        }
        if l > u {
            return Err(QpError::InvertedBounds(i));
        }
    }
    Ok(())
}

/// Range of `Σ g_i x_i` over the box.
fn box_range(terms: impl Iterator<Item = (usize, f64)>, lower: &[f64], upper: &[f64]) -> (f64, f64) {
    let (mut lo, mut hi) = (0.0, 0.0);
    for (i, g) in terms {
        if g == 0.0 {
            continue;
        }
        let (a, b) = (g * lower[i], g * upper[i]);
        lo += a.min(b);
        hi += a.max(b);
    }
    (lo, hi)
}

/// Rows that cannot be satisfied anywhere in the box.
fn box_infeasible(problem: &QpProblem<'_>, tol: f64) -> bool {
    let (lower, upper) = (&problem.lower, &problem.upper);
    problem.eq.iter().any(|c| {
        let (lo, hi) = box_range(c.coeffs.iter().copied().enumerate(), lower, upper);
        c.rhs < lo - tol || c.rhs > hi + tol
    }) || problem.ineq.iter().any(|c| {
        let (lo, _) = box_range(c.terms.iter().copied(), lower, upper);
        lo > c.rhs + tol
    })
}

struct Iterate {
    x: Vec<f64>,
    y: Vec<f64>,
    s: Vec<f64>,
    z: Vec<f64>,
}

struct Residuals {
    rx: Vec<f64>,
    ry: Vec<f64>,
    rz: Vec<f64>,
    primal: f64,
    dual: f64,
    complementarity: f64,
}

impl Residuals {
    fn kkt(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }
}

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    ds: Vec<f64>,
    dz: Vec<f64>,
}

struct Solver<'p, 'a> {
    problem: &'p QpProblem<'a>,
    rows: &'p [SparseConstraint],
    n: usize,
}

impl Solver<'_, '_> {
    fn residuals(&self, it: &Iterate) -> Residuals {
        let p = self.problem;
        let mut rx = vec![0.0; self.n];
        p.quadratic.apply(&it.x, &mut rx);
        for (r, c) in rx.iter_mut().zip(&p.linear) {
            *r = 2.0 * *r + c;
        }
        let mut ry = Vec::with_capacity(p.eq.len());
        for (c, yk) in p.eq.iter().zip(&it.y) {
            ry.push(dot(&c.coeffs, &it.x) - c.rhs);
            crate::linalg::axpy(*yk, &c.coeffs, &mut rx);
        }
        let mut rz = Vec::with_capacity(self.rows.len());
        let mut primal = norm_inf(&ry);
        let mut complementarity: f64 = 0.0;
        for ((row, sk), zk) in self.rows.iter().zip(&it.s).zip(&it.z) {
            let gx = row.eval(&it.x);
            rz.push(gx + sk - row.rhs);
            primal = primal.max(gx - row.rhs);
            complementarity = complementarity.max(zk * libm::fabs(row.rhs - gx));
            row.terms.iter().for_each(|&(i, g)| rx[i] += zk * g);
        }
        let dual = norm_inf(&rx);
        Residuals { rx, ry, rz, primal, dual, complementarity }
    }

    /// `A·H⁻¹·Aᵀ` and the columns `H⁻¹·Aᵀ`, reused by both solves of an iteration.
    fn schur(&self, factor: &Factored<'_, '_>) -> Result<(Vec<Vec<f64>>, Option<Lu>), QpError> {
        let me = self.problem.eq.len();
        if me == 0 {
            return Ok((Vec::new(), None));
        }
        let hinv_at: Vec<Vec<f64>> = self.problem.eq.iter().map(|c| factor.solve(&c.coeffs)).collect();
        let mut s = vec![0.0; me * me];
        for i in 0..me {
            for j in i..me {
                let v = dot(&self.problem.eq[i].coeffs, &hinv_at[j]);
                s[i * me + j] = v;
                s[j * me + i] = v;
            }
        }
        let scale = (0..me).fold(0.0f64, |m, i| m.max(libm::fabs(s[i * me + i])));
        let mut reg = 0.0;
        for _ in 0..6 {
            let mut t = s.clone();
            (0..me).for_each(|i| t[i * me + i] += reg);
            if let Ok(lu) = Lu::factor(me, t) {
                return Ok((hinv_at, Some(lu)));
            }
            reg = if reg == 0.0 { 1e-13 * scale.max(1e-300) } else { reg * 100.0 };
        }
        Err(QpError::Numerical)
    }

    fn direction(
        &self,
        it: &Iterate,
        res: &Residuals,
        rsz: &[f64],
        factor: &Factored<'_, '_>,
        schur: &(Vec<Vec<f64>>, Option<Lu>),
    ) -> Direction {
        // q = (Z r_z − r_sz) / s
        let q: Vec<f64> = (0..self.rows.len()).map(|k| (it.z[k] * res.rz[k] - rsz[k]) / it.s[k]).collect();
        let mut rhs1: Vec<f64> = res.rx.iter().map(|v| -v).collect();
        for (row, qk) in self.rows.iter().zip(&q) {
            row.terms.iter().for_each(|&(i, g)| rhs1[i] -= qk * g);
        }
        let mut dx = factor.solve(&rhs1);
        let mut dy = Vec::new();
        if let (cols, Some(lu)) = schur {
            let rhs: Vec<f64> =
                self.problem.eq.iter().zip(&res.ry).map(|(c, ry)| dot(&c.coeffs, &dx) + ry).collect();
            dy = lu.solve(&rhs);
            for (col, d) in cols.iter().zip(&dy) {
                crate::linalg::axpy(-d, col, &mut dx);
            }
        }
        let mut ds = Vec::with_capacity(self.rows.len());
        let mut dz = Vec::with_capacity(self.rows.len());
        for (k, row) in self.rows.iter().enumerate() {
            let gdx = row.eval(&dx);
            ds.push(-res.rz[k] - gdx);
            dz.push(q[k] + it.z[k] / it.s[k] * gdx);
        }
        Direction { dx, dy, ds, dz }
    }

    /// Farkas certificate of primal infeasibility from the current duals:
    /// `Aᵀy + Ĝᵀz ≈ 0` with `bᵀy + ĥᵀz < 0`, after normalization.
    fn farkas(&self, it: &Iterate) -> bool {
        let scale = norm_inf(&it.y).max(norm_inf(&it.z));
        if !(scale > FARKAS_TRIGGER) {
            return false;
        }
        let mut ray = vec![0.0; self.n];
        let mut gap = 0.0;
        for (c, yk) in self.problem.eq.iter().zip(&it.y) {
            crate::linalg::axpy(yk / scale, &c.coeffs, &mut ray);
            gap += c.rhs * yk / scale;
        }
        for (row, zk) in self.rows.iter().zip(&it.z) {
            row.terms.iter().for_each(|&(i, g)| ray[i] += zk / scale * g);
            gap += row.rhs * zk / scale;
        }
        norm_inf(&ray) <= FARKAS_TOL && gap < -FARKAS_TOL
    }
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter().zip(dv).filter(|(_, d)| **d < 0.0).map(|(a, d)| -a / d).fold(f64::INFINITY, f64::min)
}

/// Initial point: interior of the box where possible.
fn start_point(problem: &QpProblem<'_>) -> Vec<f64> {
    problem
        .lower
        .iter()
        .zip(&problem.upper)
        .map(|(&l, &u)| match (l.is_finite(), u.is_finite()) {
            (true, true) => 0.5 * (l + u),
            (true, false) => l + 1.0,
            (false, true) => u - 1.0,
            (false, false) => 0.0,
        })
        .collect()
}

/// Solves the convex QP described by `problem`.
///
/// Returns the best iterate found with [`QpStatus::MaxIterations`] when the
/// iteration budget runs out, and [`QpStatus::Infeasible`] when the
/// constraints admit no solution.
pub fn solve_qp(problem: &QpProblem<'_>, settings: &SolverSettings) -> Result<QpSolution, QpError> {
    validate(problem, settings)?;
    let n = problem.dim();
    let tol = settings.tolerance;

    let mut rows = problem.ineq.clone();
    for i in 0..n {
        if problem.lower[i].is_finite() {
            rows.push(SparseConstraint { terms: vec![(i, -1.0)], rhs: -problem.lower[i] });
        }
        if problem.upper[i].is_finite() {
            rows.push(SparseConstraint { terms: vec![(i, 1.0)], rhs: problem.upper[i] });
        }
    }
    let m = rows.len();

    let x0 = start_point(problem);
    if box_infeasible(problem, tol) {
        return Ok(QpSolution {
            objective: problem.objective(&x0),
            kkt_residual: f64::INFINITY,
            x: x0,
            status: QpStatus::Infeasible,
            iterations: 0,
            trace: Vec::new(),
        });
    }

    let solver = Solver { problem, rows: &rows, n };
    let newton = Newton::new(problem.quadratic, &rows);
    let s0: Vec<f64> = rows.iter().map(|r| (r.rhs - r.eval(&x0)).max(1.0)).collect();
    let mut it = Iterate { x: x0, y: vec![0.0; problem.eq.len()], s: s0, z: vec![1.0; m] };

    let mut trace = Vec::new();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut since_best = 0;
    let mut status = QpStatus::MaxIterations;
    let mut iterations = 0;

    for iter in 0..settings.max_iterations {
        iterations = iter;
        let res = solver.residuals(&it);
        let kkt = res.kkt();
        if !kkt.is_finite() {
            break;
        }
        match &best {
            Some((b, _)) if kkt >= 0.5 * *b => since_best += 1,
            _ => since_best = 0,
        }
        if best.as_ref().map_or(true, |(b, _)| kkt < *b) {
            best = Some((kkt, it.x.clone()));
        }
        if kkt <= tol {
            status = QpStatus::Optimal;
            break;
        }
        if solver.farkas(&it) {
            status = QpStatus::Infeasible;
            break;
        }
        if since_best >= STALL_LIMIT {
            if best.as_ref().is_some_and(|(_, x)| problem.primal_violation(x) > libm::sqrt(tol)) {
                status = QpStatus::Infeasible;
            }
            break;
        }

        let mu = if m == 0 { 0.0 } else { dot(&it.s, &it.z) / m as f64 };
        let w: Vec<f64> = it.z.iter().zip(&it.s).map(|(z, s)| z / s).collect();
        let factor = newton.factor(vec![0.0; n], w)?;
        let schur = solver.schur(&factor)?;

        // predictor
        let rsz: Vec<f64> = it.s.iter().zip(&it.z).map(|(s, z)| s * z).collect();
        let aff = solver.direction(&it, &res, &rsz, &factor, &schur);
        let alpha_aff = 1.0f64.min(max_step(&it.s, &aff.ds)).min(max_step(&it.z, &aff.dz));
        let sigma = if m == 0 {
            0.0
        } else {
            let mu_aff = (0..m)
                .map(|k| (it.s[k] + alpha_aff * aff.ds[k]) * (it.z[k] + alpha_aff * aff.dz[k]))
                .sum::<f64>()
                / m as f64;
            let ratio = (mu_aff / mu).clamp(0.0, 1.0);
            ratio * ratio * ratio
        };

        // corrector
        let rsz: Vec<f64> =
            (0..m).map(|k| it.s[k] * it.z[k] + aff.ds[k] * aff.dz[k] - sigma * mu).collect();
        let d = solver.direction(&it, &res, &rsz, &factor, &schur);
        let alpha = 1.0f64.min(STEP_FRACTION * max_step(&it.s, &d.ds).min(max_step(&it.z, &d.dz)));

        crate::linalg::axpy(alpha, &d.dx, &mut it.x);
        crate::linalg::axpy(alpha, &d.dy, &mut it.y);
        crate::linalg::axpy(alpha, &d.ds, &mut it.s);
        crate::linalg::axpy(alpha, &d.dz, &mut it.z);

        if settings.trace {
            trace.push(IterationTrace {
                iteration: iter + 1,
                objective: problem.objective(&it.x),
                primal_residual: res.primal,
                dual_residual: res.dual,
                complementarity: res.complementarity,
                mu,
                step: alpha,
            });
        }
        iterations = iter + 1;
    }

    let (kkt_residual, x) = match (status, best) {
        (QpStatus::Optimal, _) => (solver.residuals(&it).kkt(), it.x),
        (_, Some((k, x))) => (k, x),
        (_, None) => (f64::INFINITY, it.x),
    };
    Ok(QpSolution { objective: problem.objective(&x), x, kkt_residual, status, iterations, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{LowRankDiag, Matrix};
    use crate::qpsolve::{LinearConstraint, Padded, QuadOperator};
    use approx::assert_relative_eq;

    fn budget(n: usize) -> LinearConstraint {
        LinearConstraint { coeffs: vec![1.0; n], rhs: 1.0 }
    }

    fn long_only<'a>(v: &'a dyn QuadOperator, cap: f64) -> QpProblem<'a> {
        let n = v.dim();
        let mut p = QpProblem::new(v);
        p.eq.push(budget(n));
        p.lower = vec![0.0; n];
        p.upper = vec![cap; n];
        p
    }

    #[test]
    fn isotropic_minimum_variance_is_equal_weight() {
        let v = Matrix::identity(4);
        let sol = solve_qp(&long_only(&v, 1.0), &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        for xi in &sol.x {
            assert_relative_eq!(*xi, 0.25, epsilon = 1e-7);
        }
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn two_asset_inverse_variance() {
        // w ∝ 1/σ² for a diagonal covariance
        let v = Matrix::from_diag(&[1.0, 4.0]);
        let sol = solve_qp(&long_only(&v, 1.0), &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x[0], 0.8, epsilon = 1e-7);
        assert_relative_eq!(sol.x[1], 0.2, epsilon = 1e-7);
    }

    #[test]
    fn cap_below_one_over_n_is_infeasible() {
        let v = Matrix::identity(2);
        let sol = solve_qp(&long_only(&v, 0.3), &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn infeasibility_hidden_from_the_box_is_detected() {
        // x0 + x1 <= 0.4 and x0 + x1 = 1 with free variables
        let v = Matrix::identity(2);
        let mut p = QpProblem::new(&v);
        p.eq.push(budget(2));
        p.ineq.push(SparseConstraint { terms: vec![(0, 1.0), (1, 1.0)], rhs: 0.4 });
        let sol = solve_qp(&p, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn binding_cap_matches_grid_search() {
        let v = Matrix::from_row_major(3, 3, vec![0.04, 0.006, 0.002, 0.006, 0.09, 0.01, 0.002, 0.01, 0.01]);
        let cap = 0.5;
        let sol = solve_qp(&long_only(&v, cap), &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);

        let mut best = (f64::INFINITY, [0.0; 3]);
        let steps = 1000;
        for i in 0..=steps {
            for j in 0..=steps - i {
                let w = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
                if w.iter().any(|x| *x > cap + 1e-12) {
                    continue;
                }
                let f = v.quad_form(&w);
                if f < best.0 {
                    best = (f, w);
                }
            }
        }
        assert!(sol.objective <= best.0 + 1e-12);
        for (a, b) in sol.x.iter().zip(&best.1) {
            assert!((a - b).abs() < 2e-3, "{:?} vs {:?}", sol.x, best.1);
        }
        assert_relative_eq!(sol.x[2], 0.5, epsilon = 1e-7);
    }

    #[test]
    fn linear_term_and_free_variables() {
        // min x² + y² − 2x − 4y → (1, 2)
        let v = Matrix::identity(2);
        let mut p = QpProblem::new(&v);
        p.linear = vec![-2.0, -4.0];
        let sol = solve_qp(&p, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.x[1], 2.0, epsilon = 1e-9);
    }

    fn factor_like(n: usize) -> LowRankDiag {
        let mut op = LowRankDiag::diagonal((0..n).map(|i| (0.05 + 0.1 * ((i * 37) % 11) as f64 / 11.0).powi(2)).collect());
        let b: Vec<f64> = (0..n).map(|i| 0.4 + 1.2 * ((i * 13) % 17) as f64 / 17.0).collect();
        op.push_block(vec![b], &[0.045 * 0.045]);
        op
    }

    #[test]
    fn structured_and_dense_paths_agree() {
        let n = 120;
        let lr = factor_like(n);
        let dense = lr.to_dense();
        let a = solve_qp(&long_only(&lr, 0.05), &SolverSettings::default()).unwrap();
        let b = solve_qp(&long_only(&dense, 0.05), &SolverSettings::default()).unwrap();
        assert_eq!(a.status, QpStatus::Optimal);
        assert_eq!(b.status, QpStatus::Optimal);
        for (x, y) in a.x.iter().zip(&b.x) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(a.x.iter().all(|x| *x <= 0.05 + 1e-8 && *x >= -1e-8));
    }

    #[test]
    fn hub_constraints_in_homogenized_form() {
        // max-diversification style: min ZᵀVZ, σᵀZ = 1, 1ᵀZ = K, Z_i <= u·K, Z, K >= 0
        let n = 80;
        let lr = factor_like(n);
        let sigma: Vec<f64> = lr.to_dense().diag().iter().map(|v| v.sqrt()).collect();
        let padded = Padded { inner: &lr, dim: n + 1 };
        let mut p = QpProblem::new(&padded);
        let mut s = sigma.clone();
        s.push(0.0);
        p.eq.push(LinearConstraint { coeffs: s, rhs: 1.0 });
        let mut ones = vec![1.0; n];
        ones.push(-1.0);
        p.eq.push(LinearConstraint { coeffs: ones, rhs: 0.0 });
        p.ineq = (0..n).map(|i| SparseConstraint { terms: vec![(i, 1.0), (n, -0.05)], rhs: 0.0 }).collect();
        p.lower = vec![0.0; n + 1];
        let sol = solve_qp(&p, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let k = sol.x[n];
        assert!(k > 0.0);
        let w: Vec<f64> = sol.x[..n].iter().map(|z| z / k).collect();
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-8);
        assert!(w.iter().all(|x| *x <= 0.05 + 1e-6));
    }

    #[test]
    fn deterministic() {
        let lr = factor_like(50);
        let a = solve_qp(&long_only(&lr, 0.1), &SolverSettings::default()).unwrap();
        let b = solve_qp(&long_only(&lr, 0.1), &SolverSettings::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn iteration_budget_returns_best_iterate() {
        let lr = factor_like(50);
        let settings = SolverSettings { max_iterations: 2, trace: true, ..SolverSettings::default() };
        let sol = solve_qp(&long_only(&lr, 0.1), &settings).unwrap();
        assert_eq!(sol.status, QpStatus::MaxIterations);
        assert_eq!(sol.trace.len(), 2);
        assert!(sol.kkt_residual.is_finite());
    }

    #[test]
    fn rejects_bad_input() {
        let v = Matrix::identity(2);
        let mut p = long_only(&v, 1.0);
        p.lower[1] = 2.0;
        assert_eq!(solve_qp(&p, &SolverSettings::default()), Err(QpError::InvertedBounds(1)));
        let mut p = long_only(&v, 1.0);
        p.linear = vec![0.0];
        assert!(matches!(solve_qp(&p, &SolverSettings::default()), Err(QpError::DimensionMismatch { .. })));
        let p = long_only(&v, 1.0);
        let bad = SolverSettings { tolerance: 0.0, ..SolverSettings::default() };
        assert!(matches!(solve_qp(&p, &bad), Err(QpError::InvalidSettings(_))));
    }
}
