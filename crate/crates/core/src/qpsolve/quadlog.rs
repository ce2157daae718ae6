use alloc::vec;
use alloc::vec::Vec;

use super::{QuadLogError, QuadOperator, SolverSettings};
use crate::linalg::{cholesky_in_place, cholesky_solve, dot, LowRankDiag, Matrix, WoodburySolver};

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
/// Relative distance from the upper bound at which a coordinate counts as active.
const BOUND_EPS: f64 = 1e-12;
const PD_MARGIN: f64 = 1e-12;
const DENSE_BELOW: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadLogSolution {
    pub y: Vec<f64>,
    pub iterations: usize,
    /// `max |y_i · ∂f/∂y_i|` over coordinates not held at the bound.
    pub stationarity: f64,
}

enum Hessian {
    Structured(LowRankDiag),
    Dense(Matrix),
}

fn objective(op: &dyn QuadOperator, y: &[f64], vy: &mut [f64]) -> f64 {
    op.apply(y, vy);
    let mut f = 0.5 * dot(y, vy);
    for yi in y {
        f -= libm::log(*yi);
    }
    f
}

/// Minimizes `½yᵀVy − Σ log y_i` subject to `0 < y_i <= upper`.
///
/// `V` must be positive definite; this is checked up front and again along
/// every Newton direction.
pub fn solve_quad_log(op: &dyn QuadOperator, upper: f64, settings: &SolverSettings) -> Result<QuadLogSolution, QuadLogError> {
    if !(upper > 0.0) {
        return Err(QuadLogError::InvalidUpper(upper));
    }
    if !(settings.tolerance > 0.0) || !settings.tolerance.is_finite() {
        return Err(QuadLogError::InvalidSettings("tolerance must be positive and finite"));
    }
    if settings.max_iterations == 0 {
        return Err(QuadLogError::InvalidSettings("max_iterations must be at least 1"));
    }
    let n = op.dim();
    if n == 0 {
        return Ok(QuadLogSolution { y: Vec::new(), iterations: 0, stationarity: 0.0 });
    }

    let hessian = match op.low_rank() {
        Some(lr) if n > DENSE_BELOW && 2 * lr.rank() < n => {
            if !lr.is_positive_definite(PD_MARGIN) {
                return Err(QuadLogError::NotPositiveDefinite { curvature: f64::NAN });
            }
            Hessian::Structured(lr)
        }
        _ => {
            let dense = op.to_dense();
            let mut l = dense.clone();
            if let Err(e) = cholesky_in_place(&mut l) {
                let curvature = match e {
                    crate::linalg::LinalgError::NotPositiveDefinite { value, .. } => value,
                    _ => f64::NAN,
                };
                return Err(QuadLogError::NotPositiveDefinite { curvature });
            }
            Hessian::Dense(dense)
        }
    };
    let diag = match &hessian {
        Hessian::Structured(lr) => lr.full_diagonal(),
        Hessian::Dense(m) => m.diag(),
    };

    // scale 1/σ so that yᵀVy = n, the value it takes at the unconstrained optimum
    let mut y: Vec<f64> = diag.iter().map(|v| 1.0 / libm::sqrt(*v)).collect();
    let mut vy = vec![0.0; n];
    op.apply(&y, &mut vy);
    let alpha = libm::sqrt(n as f64 / dot(&y, &vy));
    y.iter_mut().for_each(|v| *v = (*v * alpha).min(upper));

    let mut f = objective(op, &y, &mut vy);
    let mut stationarity = f64::INFINITY;
    let at_bound = upper * (1.0 - BOUND_EPS);
    for iter in 0..settings.max_iterations {
        let g: Vec<f64> = (0..n).map(|i| vy[i] - 1.0 / y[i]).collect();
        let free: Vec<usize> = (0..n).filter(|&i| !(y[i] >= at_bound && g[i] < 0.0)).collect();
        stationarity = free.iter().map(|&i| libm::fabs(y[i] * g[i])).fold(0.0, f64::max);
        if stationarity <= settings.tolerance {
            return Ok(QuadLogSolution { y, iterations: iter, stationarity });
        }

        let rhs: Vec<f64> = free.iter().map(|&i| -g[i]).collect();
        let step_free = newton_step(&hessian, &free, &y, &rhs)?;
        let mut delta = vec![0.0; n];
        for (&i, d) in free.iter().zip(&step_free) {
            delta[i] = *d;
        }
        let mut vd = vec![0.0; n];
        op.apply(&delta, &mut vd);
        let curvature = dot(&delta, &vd);
        let barrier: f64 = delta.iter().zip(&y).map(|(d, yi)| d * d / (yi * yi)).sum();
        if !(curvature + barrier > 0.0) || curvature < -PD_MARGIN * barrier {
            return Err(QuadLogError::NotPositiveDefinite { curvature });
        }

        // largest step keeping y positive
        let mut t = delta
            .iter()
            .zip(&y)
            .filter(|(d, _)| **d < 0.0)
            .map(|(d, yi)| -0.99 * yi / d)
            .fold(1.0, f64::min);
        let mut accepted = false;
        let mut trial = vec![0.0; n];
        let mut vtrial = vec![0.0; n];
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                trial[i] = (y[i] + t * delta[i]).min(upper);
            }
            let ft = objective(op, &trial, &mut vtrial);
            let decrease: f64 = (0..n).map(|i| g[i] * (trial[i] - y[i])).sum();
            // near the optimum the decrease drops below the rounding of f
            let flat = t == 1.0 && libm::fabs(decrease) <= 1e-13 * libm::fabs(f).max(1.0);
            if ft.is_finite() && (ft <= f + ARMIJO * decrease || flat) {
                accepted = true;
                f = ft;
                core::mem::swap(&mut y, &mut trial);
                core::mem::swap(&mut vy, &mut vtrial);
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no further decrease available at this precision
            return Err(QuadLogError::MaxIterations { iterations: iter + 1, residual: stationarity });
        }
    }
    Err(QuadLogError::MaxIterations { iterations: settings.max_iterations, residual: stationarity })
}

/// Solves `(V + Diag(1/y²))_FF · Δ = rhs` on the free coordinates `F`.
fn newton_step(hessian: &Hessian, free: &[usize], y: &[f64], rhs: &[f64]) -> Result<Vec<f64>, QuadLogError> {
    match hessian {
        Hessian::Structured(lr) => {
            let k = lr.rank();
            let restricted = LowRankDiag {
                diag: free.iter().map(|&i| lr.diag[i] + 1.0 / (y[i] * y[i])).collect(),
                cols: lr.cols.iter().map(|c| free.iter().map(|&i| c[i]).collect()).collect(),
                coef: lr.coef.clone(),
            };
            debug_assert_eq!(restricted.rank(), k);
            let solver = WoodburySolver::new(restricted)
                .map_err(|_| QuadLogError::NotPositiveDefinite { curvature: f64::NAN })?;
            Ok(solver.solve(rhs))
        }
        Hessian::Dense(v) => {
            let m = free.len();
            let mut h = Matrix::zeros(m, m);
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate().take(a + 1) {
                    h[(a, b)] = v[(i, j)];
                }
                h[(a, a)] += 1.0 / (y[i] * y[i]);
            }
            cholesky_in_place(&mut h).map_err(|e| match e {
                crate::linalg::LinalgError::NotPositiveDefinite { value, .. } => {
                    QuadLogError::NotPositiveDefinite { curvature: value }
                }
                _ => QuadLogError::NotPositiveDefinite { curvature: f64::NAN },
            })?;
            let mut x = rhs.to_vec();
            cholesky_solve(&h, &mut x);
            Ok(x)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn settings() -> SolverSettings {
        SolverSettings { tolerance: 1e-12, ..SolverSettings::default() }
    }

    #[test]
    fn diagonal_solution_is_inverse_volatility() {
        // y_i·σ_i²·y_i = 1 → y_i = 1/σ_i
        let sig = [0.1, 0.2, 0.4];
        let v = Matrix::from_diag(&sig.map(|s| s * s));
        let sol = solve_quad_log(&v, 100.0, &settings()).unwrap();
        for (y, s) in sol.y.iter().zip(sig) {
            assert_relative_eq!(*y, 1.0 / s, max_relative = 1e-10);
        }
    }

    #[test]
    fn identity_with_loose_and_tight_bounds() {
        let v = Matrix::identity(3);
        let sol = solve_quad_log(&v, 5.0, &settings()).unwrap();
        sol.y.iter().for_each(|y| assert_relative_eq!(*y, 1.0, epsilon = 1e-10));
        let sol = solve_quad_log(&v, 0.5, &settings()).unwrap();
        sol.y.iter().for_each(|y| assert_relative_eq!(*y, 0.5, epsilon = 1e-14));
    }

    #[test]
    fn indefinite_is_rejected() {
        let v = Matrix::from_row_major(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(solve_quad_log(&v, 5.0, &settings()), Err(QuadLogError::NotPositiveDefinite { .. })));
        let mut lr = LowRankDiag::diagonal(vec![0.5; 40]);
        lr.push_block(vec![(0..40).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()], &[-1.0]);
        assert!(matches!(solve_quad_log(&lr, 5.0, &settings()), Err(QuadLogError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn structured_matches_dense_and_first_order_conditions() {
        let n = 60;
        let mut lr = LowRankDiag::diagonal((0..n).map(|i| 0.002 + 0.0001 * (i % 9) as f64).collect());
        lr.push_block(vec![(0..n).map(|i| 0.5 + 0.02 * i as f64).collect()], &[0.002]);
        let dense = lr.to_dense();
        let upper = 3.0;
        let a = solve_quad_log(&lr, upper, &settings()).unwrap();
        let b = solve_quad_log(&dense, upper, &settings()).unwrap();
        for (x, y) in a.y.iter().zip(&b.y) {
            assert_relative_eq!(*x, *y, max_relative = 1e-9);
        }
        // interior coordinates satisfy y_i (Vy)_i = 1, bound coordinates have (Vy)_i <= 1/y_i
        let vy = dense.matvec(&a.y);
        let mut bound = 0;
        for i in 0..n {
            if a.y[i] >= upper * (1.0 - 1e-9) {
                bound += 1;
                assert!(a.y[i] * vy[i] <= 1.0 + 1e-9);
            } else {
                assert_relative_eq!(a.y[i] * vy[i], 1.0, epsilon = 1e-9);
            }
        }
        assert!(bound > 0 && bound < n, "test should exercise both cases, got {bound}");
    }

    #[test]
    fn rejects_bad_upper() {
        let v = Matrix::identity(2);
        assert_eq!(solve_quad_log(&v, 0.0, &settings()), Err(QuadLogError::InvalidUpper(0.0)));
    }
}
