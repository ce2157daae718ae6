//! Table metrics for a backtest: annualized excess return and volatility,
//! Sharpe ratio, market beta, average positions and effective N.

use alloc::vec::Vec;

use thiserror::Error;

use crate::backtest::BacktestResult;
use crate::data::MarketSeries;
use crate::date::YearMonth;
use crate::strategies::PortfolioWeights;

pub const MIN_OBSERVATIONS: usize = 12;
const MONTHS_PER_YEAR: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    /// `12 × mean` of the monthly excess returns.
    pub avg_excess_return: f64,
    /// `√12 ×` sample standard deviation.
    pub std_dev: f64,
    pub sharpe: f64,
    pub market_beta: f64,
    pub avg_positions: f64,
    pub effective_n: f64,
}

impl MetricsRow {
    pub const LABELS: [&'static str; 6] = [
        "Average Excess Return",
        "Standard Deviation",
        "Sharpe Ratio",
        "Market Beta",
        "Average Positions",
        "Effective N",
    ];

    pub fn nan() -> Self {
        Self {
            avg_excess_return: f64::NAN,
            std_dev: f64::NAN,
            sharpe: f64::NAN,
            market_beta: f64::NAN,
            avg_positions: f64::NAN,
            effective_n: f64::NAN,
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [self.avg_excess_return, self.std_dev, self.sharpe, self.market_beta, self.avg_positions, self.effective_n]
    }

    pub fn is_nan(&self) -> bool {
        self.values().iter().all(|v| v.is_nan())
    }

    /// Bitwise equality, so NaN rows compare equal to each other.
    pub fn same_bits(&self, other: &Self) -> bool {
        self.values().iter().zip(other.values()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("need at least {MIN_OBSERVATIONS} monthly returns, got {0}")]
    TooFewObservations(usize),
    #[error("portfolio returns have zero variance; Sharpe ratio undefined")]
    SharpeUndefined,
    #[error("market series has no value for {0}")]
    MissingMarket(YearMonth),
    #[error("market returns have zero variance over the backtest; beta undefined")]
    ZeroMarketVariance,
}

/// `1/Σw²`.
pub fn effective_n(w: &PortfolioWeights) -> f64 {
    w.effective_n()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// A failed result yields a row of NaN.
pub fn compute_metrics(result: &BacktestResult, market: &MarketSeries) -> Result<MetricsRow, MetricsError> {
    if result.failed {
        return Ok(MetricsRow::nan());
    }
    let r = &result.monthly_returns;
    let m = r.len();
    if m < MIN_OBSERVATIONS {
        return Err(MetricsError::TooFewObservations(m));
    }
    let mkt = result
        .dates
        .iter()
        .map(|d| market.get(*d).ok_or(MetricsError::MissingMarket(*d)))
        .collect::<Result<Vec<f64>, _>>()?;

    let mu = mean(r);
    let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (m - 1) as f64;
    // rounding of the mean leaves a tiny spread on constant series
    let scale = r.iter().fold(0.0f64, |a, x| a.max(libm::fabs(*x)));
    if !(libm::sqrt(var) > 8.0 * f64::EPSILON * scale) {
        return Err(MetricsError::SharpeUndefined);
    }
    let avg_excess_return = MONTHS_PER_YEAR * mu;
    let std_dev = libm::sqrt(MONTHS_PER_YEAR) * libm::sqrt(var);

    let mm = mean(&mkt);
    let sxx: f64 = mkt.iter().map(|x| (x - mm) * (x - mm)).sum();
    if !(sxx > 0.0) {
        return Err(MetricsError::ZeroMarketVariance);
    }
    let sxy: f64 = mkt.iter().zip(r).map(|(x, y)| (x - mm) * (y - mu)).sum();

    let h = &result.weights_history;
    let k = h.len().max(1) as f64;
    let avg_positions = h.iter().map(|(_, w)| w.positions() as f64).sum::<f64>() / k;
    let effective_n = h.iter().map(|(_, w)| w.effective_n()).sum::<f64>() / k;

    Ok(MetricsRow {
        avg_excess_return,
        std_dev,
        sharpe: avg_excess_return / std_dev,
        market_beta: sxy / sxx,
        avg_positions,
        effective_n,
    })
}
