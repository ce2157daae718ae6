//! Rolling out-of-sample backtests.
//!
//! Every month `t` of a period the universe is re-selected from data up to
//! `t − 1`, each risk model is estimated once, all requested strategies are
//! solved, and the weights earn the realized excess returns of month `t`.
//! Rebalance dates are independent and can be spread over an [`Executor`];
//! results are stitched back in date order, so the output does not depend
//! on scheduling.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use thiserror::Error;

use crate::data::{select_universe, DataError, MarketSeries, ReturnsPanel};
use crate::date::YearMonth;
use crate::metrics::{compute_metrics, MetricsRow};
use crate::riskmodels::{estimate, ModelError, ModelKind, RiskModel};
use crate::strategies::{
    construct, diversification_ratio, portfolio_variance, PortfolioWeights, StrategyConfig, StrategyError, StrategyKind,
};

pub const DEFAULT_WINDOW: usize = 60;
pub const DEFAULT_UNIVERSE: usize = 1000;
/// Relative slack for the per-date optimality checks.
const DOMINANCE_TOL: f64 = 1e-6;

/// Half-open range of months `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PeriodSpec {
    pub name: String,
    pub start: YearMonth,
    pub end: YearMonth,
}

impl PeriodSpec {
    pub fn new(name: impl Into<String>, start: YearMonth, end: YearMonth) -> Result<Self, BacktestError> {
        let name = name.into();
        if name.is_empty() {
            return Err(BacktestError::InvalidConfig("period name must not be empty".to_string()));
        }
        if start >= end {
            return Err(BacktestError::InvalidConfig(format!("period {name}: start {start} is not before end {end}")));
        }
        Ok(Self { name, start, end })
    }

    pub fn months(&self) -> impl Iterator<Item = YearMonth> {
        YearMonth::range(self.start, self.end)
    }

    pub fn len(&self) -> usize {
        self.end.months_since(self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, date: YearMonth) -> bool {
        self.start <= date && date < self.end
    }
}

/// DotCom, GFC, Covid and PostCovid.
pub fn default_periods() -> Vec<PeriodSpec> {
    let ym = |y, m| YearMonth::new(y, m).expect("valid month");
    [
        ("DotCom", ym(1990, 1), ym(2000, 3)),
        ("GFC", ym(2000, 3), ym(2008, 9)),
        ("Covid", ym(2008, 9), ym(2020, 4)),
        ("PostCovid", ym(2020, 4), ym(2023, 12)),
    ]
    .into_iter()
    .map(|(n, s, e)| PeriodSpec { name: n.to_string(), start: s, end: e })
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub window_len: usize,
    pub universe_size: usize,
    pub strategy: StrategyConfig,
    /// Shrinkage intensity for the shrunk sample model; `None` for the default.
    pub shrinkage: Option<f64>,
    /// Eigenvalue repair of the shrunk sample covariance.
    pub psd_repair: bool,
    /// Check the optimality orderings between strategies at every date.
    pub check_invariants: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            window_len: DEFAULT_WINDOW,
            universe_size: DEFAULT_UNIVERSE,
            strategy: StrategyConfig::default(),
            shrinkage: None,
            psd_repair: false,
            check_invariants: true,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), BacktestError> {
        if self.window_len < crate::riskmodels::MIN_WINDOW {
            return Err(BacktestError::InvalidConfig(format!(
                "window_len must be at least {}",
                crate::riskmodels::MIN_WINDOW
            )));
        }
        if self.universe_size < 2 {
            return Err(BacktestError::InvalidConfig("universe_size must be at least 2".to_string()));
        }
        if let Some(d) = self.shrinkage {
            if !(0.0..=1.0).contains(&d) {
                return Err(BacktestError::InvalidConfig("shrinkage must be in [0, 1]".to_string()));
            }
        }
        self.strategy.validate().map_err(|e| BacktestError::InvalidConfig(e.to_string()))
    }
}

/// Runs independent jobs and returns their results in index order.
pub trait Executor {
    fn map_indexed<T, F>(&self, len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs everything on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Serial;

impl Executor for Serial {
    fn map_indexed<T, F>(&self, len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..len).map(f).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BacktestError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("period {period}: {detail}")]
    Coverage { period: String, detail: String },
    #[error("{date}: {source}")]
    Data { date: YearMonth, source: DataError },
    #[error("{date}: {model} model: {source}")]
    Model { date: YearMonth, model: ModelKind, source: ModelError },
    #[error("{date}: {strategy} under {model:?} model: {source}")]
    Strategy { date: YearMonth, model: Option<ModelKind>, strategy: StrategyKind, source: StrategyError },
    #[error("{date}: {model} model: optimality check failed: {detail}")]
    Invariant { date: YearMonth, model: ModelKind, detail: String },
    #[error("{0}")]
    Inconsistent(String),
}

impl BacktestError {
    /// Problems with the input data rather than with the numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(self, BacktestError::Coverage { .. } | BacktestError::Data { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub period: PeriodSpec,
    pub model: ModelKind,
    pub strategy: StrategyKind,
    /// Months of `monthly_returns`, all inside the period.
    pub dates: Vec<YearMonth>,
    pub monthly_returns: Vec<f64>,
    pub weights_history: Vec<(YearMonth, PortfolioWeights)>,
    /// The combination could not be run (the risk parity PSD case).
    pub failed: bool,
    pub failure: Option<String>,
}

struct ModelOutcome {
    portfolios: Vec<(StrategyKind, Result<PortfolioWeights, StrategyError>)>,
}

struct DateOutcome {
    returns: Vec<Option<f64>>,
    benchmarks: Vec<(StrategyKind, PortfolioWeights)>,
    models: Vec<ModelOutcome>,
}

struct Job<'a> {
    panel: &'a ReturnsPanel,
    market: &'a MarketSeries,
    models: &'a [ModelKind],
    strategies: &'a [StrategyKind],
    config: &'a EngineConfig,
}

impl Job<'_> {
    fn rebalance(&self, date: YearMonth) -> Result<DateOutcome, BacktestError> {
        let cfg = self.config;
        let snapshot = select_universe(self.panel, date, cfg.window_len, cfg.universe_size)
            .map_err(|source| BacktestError::Data { date, source })?;
        let ids: Arc<[String]> = snapshot.asset_ids().into();
        let returns = ids.iter().map(|id| self.panel.return_at(id, date)).collect();

        let mut benchmarks = Vec::new();
        for &s in self.strategies.iter().filter(|s| !s.uses_model()) {
            let mut w = construct(s, &snapshot, None, &cfg.strategy)
                .map_err(|source| BacktestError::Strategy { date, model: None, strategy: s, source })?;
            w.share_ids(&ids);
            benchmarks.push((s, w));
        }

        let mut models = Vec::new();
        if self.strategies.iter().any(|s| s.uses_model()) {
            let market_window =
                self.market.window(date, cfg.window_len).map_err(|source| BacktestError::Data { date, source })?;
            for &kind in self.models {
                let model = estimate(kind, &snapshot, market_window, cfg.shrinkage, cfg.psd_repair)
                    .map_err(|source| BacktestError::Model { date, model: kind, source })?;
                let mut portfolios = Vec::new();
                for &s in self.strategies.iter().filter(|s| s.uses_model()) {
                    match construct(s, &snapshot, Some(&model), &cfg.strategy) {
                        Ok(mut w) => {
                            w.share_ids(&ids);
                            portfolios.push((s, Ok(w)));
                        }
                        Err(e @ StrategyError::NotPositiveDefinite { .. }) => portfolios.push((s, Err(e))),
                        Err(source) => {
                            return Err(BacktestError::Strategy { date, model: Some(kind), strategy: s, source })
                        }
                    }
                }
                if cfg.check_invariants {
                    check_dominance(date, &model, &benchmarks, &portfolios, cfg.strategy.weight_cap)?;
                }
                models.push(ModelOutcome { portfolios });
            }
        }
        Ok(DateOutcome { returns, benchmarks, models })
    }
}

/// Minimum variance must not be beaten on variance, nor maximum
/// diversification on the diversification ratio, by any other portfolio
/// that satisfies the cap.
fn check_dominance(
    date: YearMonth,
    model: &RiskModel,
    benchmarks: &[(StrategyKind, PortfolioWeights)],
    portfolios: &[(StrategyKind, Result<PortfolioWeights, StrategyError>)],
    cap: f64,
) -> Result<(), BacktestError> {
    let find = |k: StrategyKind| portfolios.iter().find(|(s, _)| *s == k).and_then(|(_, w)| w.as_ref().ok());
    let feasible = |w: &PortfolioWeights| w.weights().iter().all(|x| *x <= cap + 1e-12);
    let mut rivals: Vec<(StrategyKind, &PortfolioWeights)> =
        benchmarks.iter().filter(|(_, w)| feasible(w)).map(|(s, w)| (*s, w)).collect();
    let fail = |detail: String| Err(BacktestError::Invariant { date, model: model.kind(), detail });

    if let Some(mv) = find(StrategyKind::MinVariance) {
        let v = portfolio_variance(model, mv.weights());
        for (s, w) in &rivals {
            let other = portfolio_variance(model, w.weights());
            if v > other * (1.0 + DOMINANCE_TOL) {
                return fail(format!("minimum variance {v:e} exceeds {s} variance {other:e}"));
            }
        }
        rivals.push((StrategyKind::MinVariance, mv));
    }
    if let Some(md) = find(StrategyKind::MaxDiversification) {
        let r = diversification_ratio(model, md.weights());
        for (s, w) in &rivals {
            let other = diversification_ratio(model, w.weights());
            if r < other * (1.0 - DOMINANCE_TOL) {
                return fail(format!("maximum diversification ratio {r} below {s} ratio {other}"));
            }
        }
    }
    Ok(())
}

fn check_coverage(
    panel: &ReturnsPanel,
    market: &MarketSeries,
    period: &PeriodSpec,
    window_len: usize,
) -> Result<(), BacktestError> {
    let warm = period.start.add_months(-(window_len as i32));
    let last = period.end.pred();
    let err = |detail: String| Err(BacktestError::Coverage { period: period.name.clone(), detail });
    if panel.is_empty() {
        return err("returns panel is empty".to_string());
    }
    if panel.first_date() > warm {
        return err(format!("needs returns from {warm} for a {window_len}-month warmup, panel starts {}", panel.first_date()));
    }
    if panel.last_date() < last {
        return err(format!("needs returns through {last}, panel ends {}", panel.last_date()));
    }
    if !market.covers(warm, last) {
        return err(format!("market series must cover {warm} through {last}"));
    }
    Ok(())
}

fn simulate<E: Executor>(
    job: &Job<'_>,
    period: &PeriodSpec,
    executor: &E,
) -> Result<Vec<BacktestResult>, BacktestError> {
    job.config.validate()?;
    check_coverage(job.panel, job.market, period, job.config.window_len)?;
    let dates: Vec<YearMonth> = period.months().collect();
    let outcomes = executor.map_indexed(dates.len(), |i| job.rebalance(dates[i]));
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut results = Vec::new();
    for (mi, &model) in job.models.iter().enumerate() {
        for &strategy in job.strategies {
            let mut res = BacktestResult {
                period: period.clone(),
                model,
                strategy,
                dates: Vec::with_capacity(dates.len()),
                monthly_returns: Vec::with_capacity(dates.len()),
                weights_history: Vec::with_capacity(dates.len()),
                failed: false,
                failure: None,
            };
            for (date, out) in dates.iter().zip(&outcomes) {
                let w = if strategy.uses_model() {
                    let (_, w) = out.models[mi].portfolios.iter().find(|(s, _)| *s == strategy).expect("solved");
                    match w {
                        Ok(w) => w,
                        Err(e) => {
                            res.failed = true;
                            res.failure = Some(format!("{date}: {e}"));
                            break;
                        }
                    }
                } else {
                    &out.benchmarks.iter().find(|(s, _)| *s == strategy).expect("computed").1
                };
                res.dates.push(*date);
                res.monthly_returns.push(w.realized_return(&out.returns));
                res.weights_history.push((*date, w.clone()));
            }
            if res.failed {
                res.dates.clear();
                res.monthly_returns.clear();
                res.weights_history.clear();
            }
            results.push(res);
        }
    }
    Ok(results)
}

/// One (model, strategy) combination over one period, on the calling thread.
pub fn run_backtest(
    panel: &ReturnsPanel,
    market: &MarketSeries,
    period: &PeriodSpec,
    model: ModelKind,
    strategy: StrategyKind,
    config: &EngineConfig,
) -> Result<BacktestResult, BacktestError> {
    run_backtest_with(panel, market, period, model, strategy, config, &Serial)
}

pub fn run_backtest_with<E: Executor>(
    panel: &ReturnsPanel,
    market: &MarketSeries,
    period: &PeriodSpec,
    model: ModelKind,
    strategy: StrategyKind,
    config: &EngineConfig,
    executor: &E,
) -> Result<BacktestResult, BacktestError> {
    let models = [model];
    let strategies = [strategy];
    let job = Job { panel, market, models: &models, strategies: &strategies, config };
    Ok(simulate(&job, period, executor)?.pop().expect("one combination"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub period: String,
    pub model: ModelKind,
    pub strategy: StrategyKind,
    pub metrics: MetricsRow,
}

/// A combination that produced a NaN row, and why.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub period: String,
    pub model: ModelKind,
    pub strategy: StrategyKind,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixOutput {
    /// Ordered by period, then model, then strategy, as requested.
    pub rows: Vec<MatrixRow>,
    pub results: Vec<BacktestResult>,
    pub failures: Vec<Failure>,
}

/// Every (period, model, strategy) combination. Benchmark rows are repeated
/// under each model and must come out identical.
pub fn run_matrix<E: Executor>(
    panel: &ReturnsPanel,
    market: &MarketSeries,
    periods: &[PeriodSpec],
    models: &[ModelKind],
    strategies: &[StrategyKind],
    config: &EngineConfig,
    executor: &E,
) -> Result<MatrixOutput, BacktestError> {
    if periods.is_empty() || models.is_empty() || strategies.is_empty() {
        return Err(BacktestError::InvalidConfig("need at least one period, model and strategy".to_string()));
    }
    let job = Job { panel, market, models, strategies, config };
    let mut out = MatrixOutput { rows: Vec::new(), results: Vec::new(), failures: Vec::new() };
    for period in periods {
        let results = simulate(&job, period, executor)?;
        for res in &results {
            let metrics = match compute_metrics(res, market) {
                Ok(m) => m,
                Err(e) => {
                    out.failures.push(Failure {
                        period: period.name.clone(),
                        model: res.model,
                        strategy: res.strategy,
                        reason: e.to_string(),
                    });
                    MetricsRow::nan()
                }
            };
            if let Some(reason) = &res.failure {
                out.failures.push(Failure {
                    period: period.name.clone(),
                    model: res.model,
                    strategy: res.strategy,
                    reason: reason.clone(),
                });
            }
            out.rows.push(MatrixRow { period: period.name.clone(), model: res.model, strategy: res.strategy, metrics });
        }
        for &s in strategies.iter().filter(|s| !s.uses_model()) {
            let mut rows = out.rows.iter().filter(|r| r.period == period.name && r.strategy == s);
            let first = rows.next().expect("benchmark row");
            if rows.any(|r| !r.metrics.same_bits(&first.metrics)) {
                return Err(BacktestError::Inconsistent(format!(
                    "period {}: {s} metrics differ between risk models",
                    period.name
                )));
            }
        }
        out.results.extend(results);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_synthetic_panel, SyntheticSpec};
    use approx::assert_relative_eq;

    fn small_world() -> (ReturnsPanel, MarketSeries) {
        let spec = SyntheticSpec {
            n_assets: 40,
            n_months: 60,
            start: YearMonth::new(2000, 1).unwrap(),
            seed: 11,
            ..SyntheticSpec::default()
        };
        let (p, m, _) = generate_synthetic_panel(&spec).unwrap();
        (p, m)
    }

    fn config() -> EngineConfig {
        EngineConfig { window_len: 36, universe_size: 30, ..EngineConfig::default() }
    }

    fn period() -> PeriodSpec {
        PeriodSpec::new("P", YearMonth::new(2003, 1).unwrap(), YearMonth::new(2004, 7).unwrap()).unwrap()
    }

    #[test]
    fn default_periods_are_adjacent() {
        let p = default_periods();
        assert_eq!(p.len(), 4);
        for w in p.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        assert_eq!(p[0].start.to_string(), "1990-01");
        assert_eq!(p[3].end.to_string(), "2023-12");
        assert!(PeriodSpec::new("x", p[0].end, p[0].start).is_err());
    }

    #[test]
    fn equal_weight_return_is_cross_sectional_mean() {
        let (panel, market) = small_world();
        let cfg = config();
        let res = run_backtest(&panel, &market, &period(), ModelKind::Factor, StrategyKind::EqualWeighted, &cfg).unwrap();
        assert_eq!(res.dates.len(), 18);
        for (date, r) in res.dates.iter().zip(&res.monthly_returns) {
            let snap = select_universe(&panel, *date, 36, 30).unwrap();
            let mean = snap.asset_ids().iter().map(|id| panel.return_at(id, *date).unwrap()).sum::<f64>() / 30.0;
            assert_relative_eq!(*r, mean, epsilon = 1e-15);
        }
    }

    #[test]
    fn shifting_the_period_shifts_the_returns() {
        let (panel, market) = small_world();
        let cfg = config();
        let p = period();
        let q = PeriodSpec::new("Q", p.start.succ(), p.end.succ()).unwrap();
        let a = run_backtest(&panel, &market, &p, ModelKind::Factor, StrategyKind::MinVariance, &cfg).unwrap();
        let b = run_backtest(&panel, &market, &q, ModelKind::Factor, StrategyKind::MinVariance, &cfg).unwrap();
        assert_eq!(a.monthly_returns[1..], b.monthly_returns[..b.monthly_returns.len() - 1]);
    }

    #[test]
    fn shrunk_risk_parity_fails_with_nan_row() {
        let (panel, market) = small_world();
        let cfg = config();
        let out = run_matrix(
            &panel,
            &market,
            &[period()],
            &[ModelKind::ShrunkSample],
            &[StrategyKind::EqualWeighted, StrategyKind::RiskParity],
            &cfg,
            &Serial,
        )
        .unwrap();
        assert_eq!(out.rows.len(), 2);
        assert!(out.rows[1].metrics.is_nan());
        assert!(out.results[1].failed);
        assert!(!out.rows[0].metrics.is_nan());
        assert_eq!(out.failures.len(), 1);

        let repaired = EngineConfig { psd_repair: true, ..cfg };
        let res = run_backtest(&panel, &market, &period(), ModelKind::ShrunkSample, StrategyKind::RiskParity, &repaired)
            .unwrap();
        assert!(!res.failed);
    }

    #[test]
    fn matrix_cardinality_and_benchmark_identity() {
        let (panel, market) = small_world();
        let p = period();
        let q = PeriodSpec::new("Q", p.end, p.end.add_months(6)).unwrap();
        let (panel, market) = {
            // extend the world so the second period is covered
            let spec = SyntheticSpec {
                n_assets: 40,
                n_months: 72,
                start: YearMonth::new(2000, 1).unwrap(),
                seed: 11,
                ..SyntheticSpec::default()
            };
            let _ = (panel, market);
            let (p, m, _) = generate_synthetic_panel(&spec).unwrap();
            (p, m)
        };
        let out = run_matrix(&panel, &market, &[p, q], &ModelKind::ALL, &StrategyKind::ALL, &config(), &Serial).unwrap();
        assert_eq!(out.rows.len(), 30);
        assert_eq!(out.results.len(), 30);
    }

    #[test]
    fn coverage_is_checked() {
        let (panel, market) = small_world();
        let early = PeriodSpec::new("E", YearMonth::new(2001, 1).unwrap(), YearMonth::new(2002, 1).unwrap()).unwrap();
        let err = run_backtest(&panel, &market, &early, ModelKind::Factor, StrategyKind::EqualWeighted, &config());
        assert!(matches!(err, Err(BacktestError::Coverage { .. })));
        assert!(err.unwrap_err().is_data_error());
        let late = PeriodSpec::new("L", YearMonth::new(2004, 1).unwrap(), YearMonth::new(2006, 1).unwrap()).unwrap();
        assert!(run_backtest(&panel, &market, &late, ModelKind::Factor, StrategyKind::EqualWeighted, &config()).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let (panel, market) = small_world();
        let cfg = EngineConfig { window_len: 0, ..config() };
        let err = run_backtest(&panel, &market, &period(), ModelKind::Factor, StrategyKind::EqualWeighted, &cfg);
        assert!(matches!(err, Err(BacktestError::InvalidConfig(_))));
    }
}
