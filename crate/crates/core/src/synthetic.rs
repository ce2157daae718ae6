//! Single-factor synthetic panels with known parameters.
//!
//! Market excess returns are i.i.d. `N(0, sigma_f²)`; asset `i` earns
//! `beta_i · mkt_t + eps_it` with `eps_it ~ N(0, omega_i²)`. Caps start
//! log-normal and compound with each asset's return (end-of-month values), so the
//! cap-weighted universe behaves like a market portfolio.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::Uniform;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::data::{DataError, MarketSeries, Observation, ReturnsPanel};
use crate::date::YearMonth;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_assets: usize,
    pub n_months: usize,
    pub start: YearMonth,
    /// Monthly market volatility.
    pub sigma_f: f64,
    pub beta_range: (f64, f64),
    /// Monthly idiosyncratic volatility range.
    pub idio_vol_range: (f64, f64),
    /// Mean and standard deviation of `ln(cap)` at the first month.
    pub cap_log_mean: f64,
    pub cap_log_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// 1200 assets over 1985-01..2023-12, enough to run every default
    /// period with a 60-month warmup and a 1000-name universe.
    fn default() -> Self {
        Self {
            n_assets: 1200,
            n_months: 468,
            start: YearMonth::new(1985, 1).expect("valid month"),
            sigma_f: 0.045,
            beta_range: (0.2, 1.8),
            idio_vol_range: (0.04, 0.14),
            cap_log_mean: 8.0,
            cap_log_sd: 1.5,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_assets < 2 {
            return Err(DataError::InvalidArgument("n_assets must be at least 2"));
        }
        if self.n_months < 2 {
            return Err(DataError::InvalidArgument("n_months must be at least 2"));
        }
        if !(self.sigma_f > 0.0) || !self.sigma_f.is_finite() {
            return Err(DataError::InvalidArgument("sigma_f must be positive"));
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.beta_range) {
            return Err(DataError::InvalidArgument("beta_range must be ordered"));
        }
        if !ordered(self.idio_vol_range) || !(self.idio_vol_range.0 > 0.0) {
            return Err(DataError::InvalidArgument("idio_vol_range must be ordered and positive"));
        }
        if !(self.cap_log_sd >= 0.0) || !self.cap_log_mean.is_finite() {
            return Err(DataError::InvalidArgument("cap distribution parameters invalid"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssetTruth {
    pub asset_id: String,
    pub beta: f64,
    pub idio_vol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub sigma_f: f64,
    pub assets: Vec<AssetTruth>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    Uniform::new_inclusive(lo, hi).expect("validated range").sample(rng)
}

/// Deterministic in `spec` (including the seed).
pub fn generate_synthetic_panel(spec: &SyntheticSpec) -> Result<(ReturnsPanel, MarketSeries, GroundTruth), DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = format!("{}", spec.n_assets - 1).len().max(4);

    let mut truth = Vec::with_capacity(spec.n_assets);
    let mut caps = Vec::with_capacity(spec.n_assets);
    let cap_dist = LogNormal::new(spec.cap_log_mean, spec.cap_log_sd).map_err(|_| DataError::InvalidArgument("cap distribution"))?;
    for i in 0..spec.n_assets {
        let beta = uniform(&mut rng, spec.beta_range);
        let idio_vol = uniform(&mut rng, spec.idio_vol_range);
        truth.push(AssetTruth { asset_id: format!("S{i:0width$}"), beta, idio_vol });
        caps.push(cap_dist.sample(&mut rng));
    }

    let market_dist = Normal::new(0.0, spec.sigma_f).expect("validated sigma_f");
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut market_rows = Vec::with_capacity(spec.n_months);
    let mut observations = Vec::with_capacity(spec.n_months * spec.n_assets);
    for t in 0..spec.n_months {
        let date = spec.start.add_months(t as i32);
        let mkt = market_dist.sample(&mut rng);
        market_rows.push((date, mkt));
        for (a, cap) in truth.iter().zip(caps.iter_mut()) {
            let r = a.beta * mkt + a.idio_vol * std_normal.sample(&mut rng);
            // end-of-month cap; the floor keeps it positive
            *cap *= (1.0 + r).max(0.05);
            observations.push(Observation {
                date,
                asset_id: a.asset_id.clone(),
                excess_return: r,
                market_cap: *cap,
            });
        }
    }
    let panel = ReturnsPanel::from_observations(observations)?;
    let market = MarketSeries::from_rows(market_rows)?;
    Ok((panel, market, GroundTruth { sigma_f: spec.sigma_f, assets: truth }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec { n_assets: 5, n_months: 36, seed, ..SyntheticSpec::default() }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic_panel(&small(7)).unwrap();
        let b = generate_synthetic_panel(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_panel(&small(8)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn degenerate_specs_rejected() {
        for spec in [
            SyntheticSpec { n_months: 1, ..small(1) },
            SyntheticSpec { n_assets: 1, ..small(1) },
            SyntheticSpec { beta_range: (2.0, 1.0), ..small(1) },
            SyntheticSpec { idio_vol_range: (0.0, 0.1), ..small(1) },
        ] {
            assert!(generate_synthetic_panel(&spec).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn shapes_and_ids() {
        let (panel, market, truth) = generate_synthetic_panel(&small(3)).unwrap();
        assert_eq!(panel.len(), 5 * 36);
        assert_eq!(market.len(), 36);
        assert_eq!(truth.assets[0].asset_id, "S0000");
        assert_eq!(panel.asset_count(), 5);
    }
}
