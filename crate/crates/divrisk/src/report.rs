//! Coverage report for the `validate` command.

use std::fmt::Write as _;

use divrisk_core::backtest::PeriodSpec;
use divrisk_core::data::{MarketSeries, ReturnsPanel};
use divrisk_core::YearMonth;

#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub text: String,
    /// One line per period that cannot be run as configured.
    pub warnings: Vec<String>,
}

/// Summarizes what the data supports without running anything.
pub fn coverage(
    panel: &ReturnsPanel,
    market: &MarketSeries,
    periods: &[PeriodSpec],
    window_len: usize,
    universe_size: usize,
) -> Coverage {
    let mut t = String::new();
    let _ = writeln!(
        t,
        "returns: {} observations, {} assets, {} to {}",
        panel.len(),
        panel.asset_count(),
        panel.first_date(),
        panel.last_date()
    );
    let _ = writeln!(t, "market:  {} months, {} to {}", market.len(), market.first_date(), market.last_date());
    let _ = writeln!(t, "assets per month:");
    for d in YearMonth::range(panel.first_date(), panel.last_date().succ()) {
        let _ = writeln!(t, "  {d} {}", panel.assets_at(d));
    }

    let mut warnings = Vec::new();
    let _ = writeln!(t, "periods (window {window_len}, universe {universe_size}):");
    for p in periods {
        let warm = p.start.add_months(-(window_len as i32));
        let last = p.end.pred();
        let counts: Vec<usize> = p.months().map(|d| panel.eligible_count(d, window_len)).collect();
        let min = counts.iter().copied().min().unwrap_or(0);
        let max = counts.iter().copied().max().unwrap_or(0);
        let _ = writeln!(t, "  {} [{}, {}): {} months, eligible assets {min}..{max}", p.name, p.start, p.end, p.len());
        if panel.first_date() > warm {
            warnings.push(format!(
                "period {}: needs returns from {warm} for its {window_len}-month warmup, panel starts {}",
                p.name,
                panel.first_date()
            ));
        } else if panel.last_date() < last {
            warnings.push(format!("period {}: needs returns through {last}, panel ends {}", p.name, panel.last_date()));
        } else if !market.covers(warm, last) {
            warnings.push(format!("period {}: market series must cover {warm} through {last}", p.name));
        } else if min < universe_size {
            warnings.push(format!(
                "period {}: only {min} eligible assets in some month, universe size is {universe_size}",
                p.name
            ));
        }
    }
    Coverage { text: t, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use divrisk_core::synthetic::{generate_synthetic_panel, SyntheticSpec};

    #[test]
    fn warns_about_short_warmup() {
        let spec = SyntheticSpec { n_assets: 5, n_months: 40, start: "2000-01".parse().unwrap(), ..SyntheticSpec::default() };
        let (panel, market, _) = generate_synthetic_panel(&spec).unwrap();
        let ok = PeriodSpec::new("late", "2002-07".parse().unwrap(), "2003-01".parse().unwrap()).unwrap();
        let early = PeriodSpec::new("early", "2001-01".parse().unwrap(), "2002-01".parse().unwrap()).unwrap();
        let c = coverage(&panel, &market, &[ok, early], 24, 5);
        assert!(c.text.contains("2000-01 to 2003-04"));
        assert_eq!(c.warnings.len(), 1, "{:?}", c.warnings);
        assert!(c.warnings[0].contains("period early"));
    }
}
