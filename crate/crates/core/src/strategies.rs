//! The five portfolios: value weighted, equal weighted, minimum variance,
//! maximum diversification and risk parity.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::data::UniverseSnapshot;
use crate::linalg::dot;
use crate::qpsolve::{
    solve_qp, solve_quad_log, IterationTrace, LinearConstraint, Padded, QpError, QpProblem, QpSolution, QpStatus,
    QuadLogError, QuadOperator, Scaled, SolverSettings, SparseConstraint,
};
use crate::riskmodels::{ModelKind, RiskModel};

pub const DEFAULT_WEIGHT_CAP: f64 = 0.05;
pub const DEFAULT_RP_UPPER: f64 = 5.0;
/// Solver weights below this are set to zero; also the threshold for
/// counting a position.
pub const TRUNCATION: f64 = 1e-6;
/// Slack allowed on the weight cap and on the budget.
pub const WEIGHT_TOL: f64 = 1e-8;
/// Smallest acceptable `K` in the maximum diversification program.
pub const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StrategyKind {
    ValueWeighted,
    EqualWeighted,
    MinVariance,
    MaxDiversification,
    RiskParity,
}

impl StrategyKind {
    /// Table column order.
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::ValueWeighted,
        StrategyKind::EqualWeighted,
        StrategyKind::MinVariance,
        StrategyKind::MaxDiversification,
        StrategyKind::RiskParity,
    ];

    pub fn id(self) -> &'static str {
        match self {
            StrategyKind::ValueWeighted => "value_weighted",
            StrategyKind::EqualWeighted => "equal_weighted",
            StrategyKind::MinVariance => "min_variance",
            StrategyKind::MaxDiversification => "max_diversification",
            StrategyKind::RiskParity => "risk_parity",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::ValueWeighted => "Market (Value-Weighted)",
            StrategyKind::EqualWeighted => "Equal Weighted",
            StrategyKind::MinVariance => "Minimum Variance",
            StrategyKind::MaxDiversification => "Maximum Diversification",
            StrategyKind::RiskParity => "Risk Parity",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.id() == s)
    }

    /// Whether the weights depend on the risk model.
    pub fn uses_model(self) -> bool {
        !matches!(self, StrategyKind::ValueWeighted | StrategyKind::EqualWeighted)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyConfig {
    /// Per-asset cap `u` for minimum variance and maximum diversification.
    pub weight_cap: f64,
    /// Upper bound `d` on the unnormalized risk parity variables.
    pub rp_upper: f64,
    pub solver: SolverSettings,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self { weight_cap: DEFAULT_WEIGHT_CAP, rp_upper: DEFAULT_RP_UPPER, solver: SolverSettings::default() }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        if !(self.weight_cap > 0.0 && self.weight_cap <= 1.0) {
            return Err(StrategyError::InvalidConfig("weight_cap must be in (0, 1]"));
        }
        if !(self.rp_upper > 0.0) || !self.rp_upper.is_finite() {
            return Err(StrategyError::InvalidConfig("rp_upper must be positive"));
        }
        if !(self.solver.tolerance > 0.0) || self.solver.max_iterations == 0 {
            return Err(StrategyError::InvalidConfig("solver tolerance and max_iterations must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StrategyError {
    #[error("invalid strategy configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("weight cap {cap} is infeasible for {n} assets (needs n * cap >= 1)")]
    CapInfeasible { n: usize, cap: f64 },
    #[error("{strategy}: {source}")]
    Qp { strategy: StrategyKind, source: QpError },
    #[error("{strategy}: solver ended with status {status:?} (KKT residual {kkt_residual:e})")]
    NotSolved { strategy: StrategyKind, status: QpStatus, kkt_residual: f64 },
    #[error("{strategy}: scale variable K = {k:e} at the optimum")]
    DegenerateScale { strategy: StrategyKind, k: f64 },
    #[error("risk parity needs a positive definite covariance, {model} model is not")]
    NotPositiveDefinite { model: ModelKind },
    #[error("risk parity: {0}")]
    QuadLog(QuadLogError),
    #[error("weights are invalid: {0}")]
    InvalidWeights(&'static str),
    #[error("risk model has {model} assets but the universe has {universe}")]
    DimensionMismatch { model: usize, universe: usize },
}

/// Nonnegative weights summing to one, aligned with `asset_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioWeights {
    asset_ids: Arc<[String]>,
    w: Vec<f64>,
}

impl PortfolioWeights {
    /// Clips entries in `[-1e-10, 0)` to zero; rejects anything else off the simplex.
    pub fn new(asset_ids: impl Into<Arc<[String]>>, mut w: Vec<f64>) -> Result<Self, StrategyError> {
        let asset_ids = asset_ids.into();
        if asset_ids.len() != w.len() {
            return Err(StrategyError::DimensionMismatch { model: w.len(), universe: asset_ids.len() });
        }
        if w.iter().any(|v| !v.is_finite() || *v < -1e-10) {
            return Err(StrategyError::InvalidWeights("negative or non-finite weight"));
        }
        w.iter_mut().for_each(|v| *v = v.max(0.0));
        if libm::fabs(w.iter().sum::<f64>() - 1.0) > WEIGHT_TOL {
            return Err(StrategyError::InvalidWeights("weights do not sum to one"));
        }
        Ok(Self { asset_ids, w })
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    /// Replaces the id list with an equal, shared one to save memory when
    /// many portfolios cover the same universe.
    pub fn share_ids(&mut self, ids: &Arc<[String]>) {
        if !Arc::ptr_eq(&self.asset_ids, ids) && self.asset_ids[..] == ids[..] {
            self.asset_ids = Arc::clone(ids);
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Number of weights above [`TRUNCATION`].
    pub fn positions(&self) -> usize {
        self.w.iter().filter(|v| **v > TRUNCATION).count()
    }

    /// Inverse Herfindahl index `1/Σw²`.
    pub fn effective_n(&self) -> f64 {
        // (Σr)²/Σr² with r = w/max w equals 1/Σw² when Σw = 1, and is
        // exactly n for n equal weights
        let m = self.w.iter().fold(0.0f64, |a, x| a.max(*x));
        let (s, s2) = self.w.iter().fold((0.0, 0.0), |(s, s2), x| {
            let r = x / m;
            (s + r, s2 + r * r)
        });
        s * s / s2
    }

    /// `Σ w_i r_i` over the assets; `None` entries contribute zero.
    pub fn realized_return(&self, returns: &[Option<f64>]) -> f64 {
        self.w.iter().zip(returns).map(|(w, r)| w * r.unwrap_or(0.0)).sum()
    }
}

/// Zeroes weights below [`TRUNCATION`] and renormalizes, keeping every
/// weight at or below `cap` by redistributing any excess over the
/// uncapped positions.
fn finalize(mut x: Vec<f64>, cap: Option<f64>) -> Result<Vec<f64>, StrategyError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StrategyError::InvalidWeights("solver returned non-finite weights"));
    }
    x.iter_mut().for_each(|v| {
        if *v < TRUNCATION {
            *v = 0.0
        }
    });
    let total: f64 = x.iter().sum();
    if !(total > 0.0) {
        return Err(StrategyError::InvalidWeights("all weights truncated"));
    }
    x.iter_mut().for_each(|v| *v /= total);
    let Some(cap) = cap else { return Ok(x) };
    let positive = x.iter().filter(|v| **v > 0.0).count();
    if (positive as f64) * cap < 1.0 {
        // cannot respect the cap on this support; keep the plain renormalization
        return Ok(x);
    }
    for _ in 0..x.len() {
        let excess: f64 = x.iter().filter(|v| **v > cap).map(|v| v - cap).sum();
        if excess <= 0.0 {
            break;
        }
        let room: f64 = x.iter().filter(|v| **v > 0.0 && **v < cap).sum();
        x.iter_mut().for_each(|v| *v = v.min(cap));
        if room > 0.0 {
            let scale = 1.0 + excess / room;
            x.iter_mut().filter(|v| **v > 0.0 && **v < cap).for_each(|v| *v *= scale);
        }
    }
    Ok(x)
}

fn single_asset(ids: &[String]) -> Option<PortfolioWeights> {
    (ids.len() == 1).then(|| PortfolioWeights { asset_ids: ids.into(), w: vec![1.0] })
}

fn check_cap(n: usize, cap: f64) -> Result<(), StrategyError> {
    if (n as f64) * cap < 1.0 - 1e-12 {
        return Err(StrategyError::CapInfeasible { n, cap });
    }
    Ok(())
}

pub fn equal_weight(snapshot: &UniverseSnapshot) -> PortfolioWeights {
    let n = snapshot.n_assets();
    PortfolioWeights { asset_ids: snapshot.asset_ids().into(), w: vec![1.0 / n as f64; n] }
}

/// Cap weighted, using the caps recorded in the snapshot.
pub fn value_weight(snapshot: &UniverseSnapshot) -> PortfolioWeights {
    let total: f64 = snapshot.caps().iter().sum();
    PortfolioWeights { asset_ids: snapshot.asset_ids().into(), w: snapshot.caps().iter().map(|c| c / total).collect() }
}

fn qp_outcome(strategy: StrategyKind, problem: &QpProblem<'_>, settings: &SolverSettings) -> Result<QpSolution, StrategyError> {
    let sol = solve_qp(problem, settings).map_err(|source| StrategyError::Qp { strategy, source })?;
    if sol.status != QpStatus::Optimal {
        return Err(StrategyError::NotSolved { strategy, status: sol.status, kkt_residual: sol.kkt_residual });
    }
    Ok(sol)
}

/// `min xᵀVx` subject to `1ᵀx = 1`, `0 <= x <= u`.
pub fn min_variance(model: &RiskModel, config: &StrategyConfig) -> Result<PortfolioWeights, StrategyError> {
    config.validate()?;
    if let Some(w) = single_asset(&model.asset_ids) {
        return Ok(w);
    }
    let sol = min_variance_qp(model, config)?;
    PortfolioWeights::new(model.asset_ids.clone(), finalize(sol.x, Some(config.weight_cap))?)
}

fn min_variance_qp(model: &RiskModel, config: &StrategyConfig) -> Result<QpSolution, StrategyError> {
    let n = model.dim();
    check_cap(n, config.weight_cap)?;
    // The solver tolerances are absolute. Scaling V so the equal-weight
    // portfolio has unit variance keeps the complementarity gap, and with it
    // the residue left on assets that belong at zero, independent of units.
    let ones = vec![1.0; n];
    let ew = portfolio_variance(model, &ones) / (n * n) as f64;
    let factor = if ew > 0.0 && ew.is_finite() { 1.0 / ew } else { 1.0 };
    let scaled = Scaled { inner: model, factor };
    let mut problem = QpProblem::new(&scaled);
    problem.eq.push(LinearConstraint { coeffs: ones, rhs: 1.0 });
    problem.lower = vec![0.0; n];
    problem.upper = vec![config.weight_cap; n];
    qp_outcome(StrategyKind::MinVariance, &problem, &config.solver)
}

/// Maximizes `σᵀx / sqrt(xᵀVx)` over the capped long-only simplex, with
/// `σ` the model's own volatilities.
///
/// Solved as `min ZᵀVZ` over `(Z, K)` with `σᵀZ = 1`, `1ᵀZ = K`,
/// `Z <= u·K`, `Z, K >= 0`, then `x = Z / K`.
pub fn max_diversification(model: &RiskModel, config: &StrategyConfig) -> Result<PortfolioWeights, StrategyError> {
    config.validate()?;
    if let Some(w) = single_asset(&model.asset_ids) {
        return Ok(w);
    }
    let n = model.dim();
    let zk = max_diversification_qp(model, config)?.x;
    let k = zk[n];
    if !(k > MIN_SCALE) {
        return Err(StrategyError::DegenerateScale { strategy: StrategyKind::MaxDiversification, k });
    }
    let x: Vec<f64> = zk[..n].iter().map(|z| z / k).collect();
    PortfolioWeights::new(model.asset_ids.clone(), finalize(x, Some(config.weight_cap))?)
}

fn max_diversification_qp(model: &RiskModel, config: &StrategyConfig) -> Result<QpSolution, StrategyError> {
    let n = model.dim();
    check_cap(n, config.weight_cap)?;
    let padded = Padded { inner: model, dim: n + 1 };
    let mut problem = QpProblem::new(&padded);
    let mut s = model.volatilities();
    s.push(0.0);
    problem.eq.push(LinearConstraint { coeffs: s, rhs: 1.0 });
    let mut ones = vec![1.0; n + 1];
    ones[n] = -1.0;
    problem.eq.push(LinearConstraint { coeffs: ones, rhs: 0.0 });
    problem.ineq = (0..n)
        .map(|i| SparseConstraint { terms: vec![(i, 1.0), (n, -config.weight_cap)], rhs: 0.0 })
        .collect();
    problem.lower = vec![0.0; n + 1];
    qp_outcome(StrategyKind::MaxDiversification, &problem, &config.solver)
}

/// Per-iteration solver trace of the QP behind `kind`, for diagnostics.
/// Empty for strategies that do not solve a QP.
pub fn qp_trace(kind: StrategyKind, model: &RiskModel, config: &StrategyConfig) -> Result<Vec<IterationTrace>, StrategyError> {
    config.validate()?;
    let config = StrategyConfig { solver: SolverSettings { trace: true, ..config.solver }, ..*config };
    if model.dim() < 2 {
        return Ok(Vec::new());
    }
    Ok(match kind {
        StrategyKind::MinVariance => min_variance_qp(model, &config)?.trace,
        StrategyKind::MaxDiversification => max_diversification_qp(model, &config)?.trace,
        _ => Vec::new(),
    })
}

/// Normalized solution of `min ½YᵀVY − Σ log y_i` with `0 < Y <= d`.
pub fn risk_parity(model: &RiskModel, config: &StrategyConfig) -> Result<PortfolioWeights, StrategyError> {
    config.validate()?;
    if let Some(w) = single_asset(&model.asset_ids) {
        return Ok(w);
    }
    if !model.is_certified_pd() {
        return Err(StrategyError::NotPositiveDefinite { model: model.kind() });
    }
    let sol = solve_quad_log(model, config.rp_upper, &config.solver).map_err(|e| match e {
        QuadLogError::NotPositiveDefinite { .. } => StrategyError::NotPositiveDefinite { model: model.kind() },
        other => StrategyError::QuadLog(other),
    })?;
    let total: f64 = sol.y.iter().sum();
    let x: Vec<f64> = sol.y.iter().map(|y| y / total).collect();
    PortfolioWeights::new(model.asset_ids.clone(), finalize(x, None)?)
}

/// Weights for `kind`. `model` may be `None` only for the two benchmarks.
pub fn construct(
    kind: StrategyKind,
    snapshot: &UniverseSnapshot,
    model: Option<&RiskModel>,
    config: &StrategyConfig,
) -> Result<PortfolioWeights, StrategyError> {
    let model = match (kind.uses_model(), model) {
        (false, _) => None,
        (true, Some(m)) => Some(m),
        (true, None) => return Err(StrategyError::InvalidConfig("strategy needs a risk model")),
    };
    if let Some(m) = model {
        if m.asset_ids.as_slice() != snapshot.asset_ids() {
            return Err(StrategyError::DimensionMismatch { model: m.dim(), universe: snapshot.n_assets() });
        }
    }
    match (kind, model) {
        (StrategyKind::ValueWeighted, _) => Ok(value_weight(snapshot)),
        (StrategyKind::EqualWeighted, _) => Ok(equal_weight(snapshot)),
        (StrategyKind::MinVariance, Some(m)) => min_variance(m, config),
        (StrategyKind::MaxDiversification, Some(m)) => max_diversification(m, config),
        (StrategyKind::RiskParity, Some(m)) => risk_parity(m, config),
        _ => unreachable!("model presence checked above"),
    }
}

/// `xᵀVx`.
pub fn portfolio_variance(model: &dyn QuadOperator, w: &[f64]) -> f64 {
    let mut vw = vec![0.0; w.len()];
    model.apply(w, &mut vw);
    dot(w, &vw)
}

/// `σᵀw / sqrt(wᵀVw)` with `σ` the model volatilities.
pub fn diversification_ratio(model: &RiskModel, w: &[f64]) -> f64 {
    dot(&model.volatilities(), w) / libm::sqrt(portfolio_variance(model, w))
}
