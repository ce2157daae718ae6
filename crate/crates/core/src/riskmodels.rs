//! Covariance estimators: shrunk single-factor, constant correlation, and
//! sample covariance shrunk toward a constant-correlation target.
//!
//! The two structured models are kept in factored form so that `V·x`
//! costs `O(n)`; the shrunk sample model is dense but also remembers its
//! diagonal-plus-low-rank decomposition (the sample part has rank at most
//! `T`) for the solvers.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::data::UniverseSnapshot;
use crate::linalg::{dot, LowRankDiag, Matrix};

/// Floor for estimated variances, in monthly variance units.
pub const VARIANCE_FLOOR: f64 = 1e-10;
/// Shortest window the structured estimators accept.
pub const MIN_WINDOW: usize = 24;
/// Distance kept between the average correlation and its PSD limits.
pub const RHO_MARGIN: f64 = 1e-6;
pub const DEFAULT_SHRINKAGE: f64 = 1.0 / 3.0;
/// Largest dimension [`RiskModel::materialize`] will allocate by default.
pub const DEFAULT_DENSE_CAP: usize = 4096;
/// Relative eigenvalue floor used by the optional PSD repair.
pub const PSD_REPAIR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("non-finite input")]
    NonFinite,
    #[error("input {index} is not positive ({value})")]
    NonPositive { index: usize, value: f64 },
    #[error("window of {actual} months is shorter than the required {required}")]
    WindowTooShort { required: usize, actual: usize },
    #[error("market window has zero variance")]
    ZeroMarketVariance,
    #[error("need at least {required} assets, got {actual}")]
    TooFewAssets { required: usize, actual: usize },
    #[error("shrinkage intensity {0} outside [0, 1]")]
    InvalidShrinkage(f64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("dense materialization of {n} assets exceeds cap {cap}")]
    DenseCapExceeded { n: usize, cap: usize },
}

/// `β := β̂ + (1 − β̂)/3`, i.e. one third of the way toward one.
pub fn shrink_beta(beta_hat: f64) -> Result<f64, ModelError> {
    if !beta_hat.is_finite() {
        return Err(ModelError::NonFinite);
    }
    Ok(2.0 / 3.0 * beta_hat + 1.0 / 3.0)
}

/// Moves every log value one third of the way toward the cross-sectional
/// mean of the logs.
///
/// Works on variances or volatilities alike: the log of a variance is
/// twice the log of the volatility, so shrinking either and converting
/// gives the same numbers. The mean of the output logs equals the mean of
/// the input logs.
pub fn shrink_log_variances(values: &[f64]) -> Result<Vec<f64>, ModelError> {
    let mut logs = Vec::with_capacity(values.len());
    for (index, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(ModelError::NonFinite);
        }
        if !(v > 0.0) {
            return Err(ModelError::NonPositive { index, value: v });
        }
        logs.push(libm::log(v));
    }
    if logs.is_empty() {
        return Ok(Vec::new());
    }
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    Ok(logs.into_iter().map(|l| libm::exp(2.0 / 3.0 * l + mean / 3.0)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Factor,
    ConstantCorrelation,
    ShrunkSample,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Factor, ModelKind::ConstantCorrelation, ModelKind::ShrunkSample];

    /// Short identifier used in file names and config.
    pub fn id(self) -> &'static str {
        match self {
            ModelKind::Factor => "factor",
            ModelKind::ConstantCorrelation => "constcorr",
            ModelKind::ShrunkSample => "shrunk",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Factor => "Market Factor Risk Model",
            ModelKind::ConstantCorrelation => "Constant Correlation Covariance Model",
            ModelKind::ShrunkSample => "Shrunk Sample Covariance Matrix",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.id() == s)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// `V = σ_f²·b·bᵀ + Diag(d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub sigma_f2: f64,
    pub b: Vec<f64>,
    pub d: Vec<f64>,
    /// Raw OLS slopes before shrinkage.
    pub beta_hat: Vec<f64>,
    /// Raw residual variances (after the floor, before shrinkage).
    pub omega_hat2: Vec<f64>,
}

/// `V = ρ·σσᵀ + (1 − ρ)·Diag(σ)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantCorrelationModel {
    pub rho: f64,
    pub sigma: Vec<f64>,
    /// Average pairwise sample correlation before clamping.
    pub rho_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShrunkSampleModel {
    pub v: Matrix,
    pub delta: f64,
    /// Eigenvalues were clipped by the repair step.
    pub psd_repaired: bool,
    /// The repair step ran, so `v` is known to be positive definite.
    pub pd_certified: bool,
    structure: Option<LowRankDiag>,
}

impl ShrunkSampleModel {
    /// Wraps an explicit symmetric matrix, e.g. one estimated elsewhere.
    pub fn from_dense(v: Matrix, delta: f64, pd_certified: bool) -> Self {
        Self { v, delta, psd_repaired: false, pd_certified, structure: None }
    }

    /// Diagonal-plus-low-rank form of `v`, absent after a repair.
    pub fn structure(&self) -> Option<&LowRankDiag> {
        self.structure.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Factor(FactorModel),
    ConstantCorrelation(ConstantCorrelationModel),
    ShrunkSample(ShrunkSampleModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskModel {
    pub asset_ids: Vec<String>,
    pub cov: Covariance,
}

impl RiskModel {
    pub fn new(asset_ids: Vec<String>, cov: Covariance) -> Result<Self, ModelError> {
        let n = match &cov {
            Covariance::Factor(m) => {
                if m.d.len() != m.b.len() {
                    return Err(ModelError::DimensionMismatch { expected: m.b.len(), actual: m.d.len() });
                }
                m.b.len()
            }
            Covariance::ConstantCorrelation(m) => m.sigma.len(),
            Covariance::ShrunkSample(m) => {
                if m.v.rows() != m.v.cols() {
                    return Err(ModelError::DimensionMismatch { expected: m.v.rows(), actual: m.v.cols() });
                }
                m.v.rows()
            }
        };
        if n != asset_ids.len() {
            return Err(ModelError::DimensionMismatch { expected: asset_ids.len(), actual: n });
        }
        Ok(Self { asset_ids, cov })
    }

    pub fn kind(&self) -> ModelKind {
        match self.cov {
            Covariance::Factor(_) => ModelKind::Factor,
            Covariance::ConstantCorrelation(_) => ModelKind::ConstantCorrelation,
            Covariance::ShrunkSample(_) => ModelKind::ShrunkSample,
        }
    }

    pub fn dim(&self) -> usize {
        self.asset_ids.len()
    }

    /// Whether the model is known to be positive definite. The structured
    /// models always are; the shrunk sample model only after repair.
    pub fn is_certified_pd(&self) -> bool {
        match &self.cov {
            Covariance::ShrunkSample(m) => m.pd_certified,
            _ => true,
        }
    }

    pub fn cov_matvec_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.cov {
            Covariance::Factor(m) => {
                let s = m.sigma_f2 * dot(&m.b, x);
                for (((o, b), d), xi) in out.iter_mut().zip(&m.b).zip(&m.d).zip(x) {
                    *o = s * b + d * xi;
                }
            }
            Covariance::ConstantCorrelation(m) => {
                let s = m.rho * dot(&m.sigma, x);
                let w = 1.0 - m.rho;
                for ((o, sg), xi) in out.iter_mut().zip(&m.sigma).zip(x) {
                    *o = s * sg + w * sg * sg * xi;
                }
            }
            Covariance::ShrunkSample(m) => m.v.matvec_into(x, out),
        }
    }

    /// `V·x`.
    pub fn cov_matvec(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.dim() {
            return Err(ModelError::DimensionMismatch { expected: self.dim(), actual: x.len() });
        }
        let mut out = vec![0.0; x.len()];
        self.cov_matvec_into(x, &mut out);
        Ok(out)
    }

    /// The implied covariance as an explicit symmetric matrix.
    pub fn materialize(&self, dense_cap: usize) -> Result<Matrix, ModelError> {
        let n = self.dim();
        if n > dense_cap {
            return Err(ModelError::DenseCapExceeded { n, cap: dense_cap });
        }
        let mut v = Matrix::zeros(n, n);
        match &self.cov {
            Covariance::Factor(m) => {
                for i in 0..n {
                    for j in 0..n {
                        v[(i, j)] = m.sigma_f2 * (m.b[i] * m.b[j]);
                    }
                    v[(i, i)] += m.d[i];
                }
            }
            Covariance::ConstantCorrelation(m) => {
                for i in 0..n {
                    for j in 0..n {
                        v[(i, j)] = if i == j { m.sigma[i] * m.sigma[i] } else { m.rho * (m.sigma[i] * m.sigma[j]) };
                    }
                }
            }
            Covariance::ShrunkSample(m) => v = m.v.clone(),
        }
        Ok(v)
    }

    /// `diag(V)`.
    pub fn variances(&self) -> Vec<f64> {
        match &self.cov {
            Covariance::Factor(m) => m.b.iter().zip(&m.d).map(|(b, d)| m.sigma_f2 * b * b + d).collect(),
            Covariance::ConstantCorrelation(m) => m.sigma.iter().map(|s| s * s).collect(),
            Covariance::ShrunkSample(m) => m.v.diag(),
        }
    }

    pub fn volatilities(&self) -> Vec<f64> {
        self.variances().into_iter().map(|v| libm::sqrt(v.max(0.0))).collect()
    }

    /// Diagonal-plus-low-rank form when the model has one.
    pub fn low_rank(&self) -> Option<LowRankDiag> {
        match &self.cov {
            Covariance::Factor(m) => {
                let mut op = LowRankDiag::diagonal(m.d.clone());
                op.push_block(vec![m.b.clone()], &[m.sigma_f2]);
                Some(op)
            }
            Covariance::ConstantCorrelation(m) => {
                let mut op = LowRankDiag::diagonal(m.sigma.iter().map(|s| (1.0 - m.rho) * s * s).collect());
                if m.rho != 0.0 {
                    op.push_block(vec![m.sigma.clone()], &[m.rho]);
                }
                Some(op)
            }
            Covariance::ShrunkSample(m) => m.structure.clone(),
        }
    }
}

/// Rows of the window with their means removed.
fn centered_rows(window: &Matrix) -> Matrix {
    let t = window.cols();
    let mut c = window.clone();
    for i in 0..c.rows() {
        let row = c.row_mut(i);
        let mean = row.iter().sum::<f64>() / t as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    c
}

/// Average of the `n(n−1)/2` distinct pairwise sample correlations,
/// computed in `O(nT)` from unit-norm centered rows:
/// `Σ_{i≠j} ρ_ij = ‖Σ_i z_i‖² − Σ_i ‖z_i‖²`. Rows with (near) zero
/// variance contribute zero correlation.
fn average_correlation(centered: &Matrix) -> f64 {
    let (n, t) = (centered.rows(), centered.cols());
    let mut sum = vec![0.0; t];
    let mut self_terms = 0.0;
    for i in 0..n {
        let row = centered.row(i);
        let ss = dot(row, row);
        if ss / (t as f64 - 1.0) < VARIANCE_FLOOR {
            continue;
        }
        let inv = 1.0 / libm::sqrt(ss);
        let mut norm2 = 0.0;
        for (s, v) in sum.iter_mut().zip(row) {
            let z = v * inv;
            *s += z;
            norm2 += z * z;
        }
        self_terms += norm2;
    }
    (dot(&sum, &sum) - self_terms) / (n as f64 * (n as f64 - 1.0))
}

/// Shrunk single-factor model from a universe window and the market
/// excess returns over the same months.
///
/// OLS with intercept per asset; residual variance uses `T − 2`.
pub fn estimate_single_factor(snapshot: &UniverseSnapshot, market_window: &[f64]) -> Result<FactorModel, ModelError> {
    let t = snapshot.window_len();
    if market_window.len() != t {
        return Err(ModelError::DimensionMismatch { expected: t, actual: market_window.len() });
    }
    if t < MIN_WINDOW {
        return Err(ModelError::WindowTooShort { required: MIN_WINDOW, actual: t });
    }
    if market_window.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite);
    }
    let m_mean = market_window.iter().sum::<f64>() / t as f64;
    let mc: Vec<f64> = market_window.iter().map(|m| m - m_mean).collect();
    let sxx = dot(&mc, &mc);
    let sigma_f2 = sxx / (t as f64 - 1.0);
    if !(sigma_f2 > 0.0) {
        return Err(ModelError::ZeroMarketVariance);
    }
    let centered = centered_rows(snapshot.window());
    let n = snapshot.n_assets();
    let mut beta_hat = Vec::with_capacity(n);
    let mut omega_hat2 = Vec::with_capacity(n);
    for i in 0..n {
        let r = centered.row(i);
        let sxy = dot(r, &mc);
        let syy = dot(r, r);
        let beta = sxy / sxx;
        let ssr = syy - beta * sxy;
        beta_hat.push(beta);
        omega_hat2.push((ssr / (t as f64 - 2.0)).max(VARIANCE_FLOOR));
    }
    let b = beta_hat.iter().map(|&bh| shrink_beta(bh)).collect::<Result<Vec<_>, _>>()?;
    let d = shrink_log_variances(&omega_hat2)?;
    Ok(FactorModel { sigma_f2, b, d, beta_hat, omega_hat2 })
}

/// Constant-correlation model: `ρ` is the mean pairwise sample
/// correlation clamped into `(−1/(n−1), 1)`, volatilities are shrunk in
/// log space.
pub fn estimate_constant_correlation(snapshot: &UniverseSnapshot) -> Result<ConstantCorrelationModel, ModelError> {
    let (n, t) = (snapshot.n_assets(), snapshot.window_len());
    if n < 2 {
        return Err(ModelError::TooFewAssets { required: 2, actual: n });
    }
    if t < MIN_WINDOW {
        return Err(ModelError::WindowTooShort { required: MIN_WINDOW, actual: t });
    }
    let centered = centered_rows(snapshot.window());
    let variances: Vec<f64> =
        (0..n).map(|i| (dot(centered.row(i), centered.row(i)) / (t as f64 - 1.0)).max(VARIANCE_FLOOR)).collect();
    let rho_hat = average_correlation(&centered);
    if !rho_hat.is_finite() {
        return Err(ModelError::NonFinite);
    }
    let lo = -1.0 / (n as f64 - 1.0) + RHO_MARGIN;
    let hi = 1.0 - RHO_MARGIN;
    let rho = rho_hat.clamp(lo, hi);
    let sigma = shrink_log_variances(&variances)?.into_iter().map(libm::sqrt).collect();
    Ok(ConstantCorrelationModel { rho, sigma, rho_hat })
}

/// `v = δ·F + (1 − δ)·S` with `S` the sample covariance (denominator
/// `T − 1`) and `F` the constant-correlation matrix built from `S`.
///
/// With `repair`, eigenvalues below `1e−8·λ_max` are clipped and the model
/// is marked as certified positive definite.
pub fn estimate_shrunk_sample(
    snapshot: &UniverseSnapshot,
    delta: Option<f64>,
    repair: bool,
) -> Result<ShrunkSampleModel, ModelError> {
    let delta = delta.unwrap_or(DEFAULT_SHRINKAGE);
    if !(0.0..=1.0).contains(&delta) {
        return Err(ModelError::InvalidShrinkage(delta));
    }
    let (n, t) = (snapshot.n_assets(), snapshot.window_len());
    if t < 2 {
        return Err(ModelError::WindowTooShort { required: 2, actual: t });
    }
    if snapshot.window().as_slice().iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite);
    }
    let centered = centered_rows(snapshot.window());
    let denom = t as f64 - 1.0;
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let c = dot(centered.row(i), centered.row(j)) / denom;
            s[(i, j)] = c;
            s[(j, i)] = c;
        }
    }
    let vols: Vec<f64> = (0..n).map(|i| libm::sqrt(s[(i, i)])).collect();
    let rbar = if n > 1 { average_correlation(&centered) } else { 0.0 };

    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            v[(i, j)] = if i == j { s[(i, i)] } else { delta * rbar * (vols[i] * vols[j]) + (1.0 - delta) * s[(i, j)] };
        }
    }

    let mut psd_repaired = false;
    let structure = if repair {
        let lmax = v.symmetric_eigenvalues().last().copied().unwrap_or(0.0);
        psd_repaired = v.clip_eigenvalues(PSD_REPAIR_FLOOR * lmax.max(VARIANCE_FLOOR));
        None
    } else {
        // Diag(δ(1−r̄)s²) + δ·r̄·s·sᵀ + (1−δ)/(T−1)·C·Cᵀ
        let mut op = LowRankDiag::diagonal(vols.iter().map(|s| delta * (1.0 - rbar) * s * s).collect());
        if delta * rbar != 0.0 {
            op.push_block(vec![vols.clone()], &[delta * rbar]);
        }
        if delta < 1.0 {
            let cols: Vec<Vec<f64>> = (0..t).map(|k| (0..n).map(|i| centered[(i, k)]).collect()).collect();
            let c = (1.0 - delta) / denom;
            let mut block = vec![0.0; t * t];
            for k in 0..t {
                block[k * t + k] = c;
            }
            op.push_block(cols, &block);
        }
        Some(op)
    };
    Ok(ShrunkSampleModel { v, delta, psd_repaired, pd_certified: repair, structure })
}

/// Estimates `kind` for a snapshot. `market_window` is only read by the
/// factor model.
pub fn estimate(
    kind: ModelKind,
    snapshot: &UniverseSnapshot,
    market_window: &[f64],
    delta: Option<f64>,
    psd_repair: bool,
) -> Result<RiskModel, ModelError> {
    let cov = match kind {
        ModelKind::Factor => Covariance::Factor(estimate_single_factor(snapshot, market_window)?),
        ModelKind::ConstantCorrelation => Covariance::ConstantCorrelation(estimate_constant_correlation(snapshot)?),
        ModelKind::ShrunkSample => Covariance::ShrunkSample(estimate_shrunk_sample(snapshot, delta, psd_repair)?),
    };
    RiskModel::new(snapshot.asset_ids().to_vec(), cov)
}
