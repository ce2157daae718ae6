//! Return panels, market series and per-date universe selection.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use thiserror::Error;

use crate::date::YearMonth;
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("empty input")]
    Empty,
    #[error("duplicate observation ({date}, {asset_id})")]
    DuplicateKey { date: YearMonth, asset_id: String },
    #[error("non-positive market cap {value} at ({date}, {asset_id})")]
    NonPositiveCap { date: YearMonth, asset_id: String, value: f64 },
    #[error("non-finite {field} at {date}")]
    NonFinite { date: YearMonth, field: &'static str },
    #[error("gap in monthly sequence{}: {missing} is missing", asset_id.as_ref().map(|a| alloc::format!(" for {a}")).unwrap_or_default())]
    Gap { asset_id: Option<String>, missing: YearMonth },
    #[error("duplicate date {0}")]
    DuplicateDate(YearMonth),
    #[error("{date}: need {required} months of history before this date, panel has {available}")]
    InsufficientHistory { date: YearMonth, required: usize, available: usize },
    #[error("{date}: requested {requested} assets but only {eligible} are eligible")]
    InsufficientUniverse { date: YearMonth, requested: usize, eligible: usize },
    #[error("market series has no value for {0}")]
    MissingMarket(YearMonth),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

/// One row of the long-format panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub date: YearMonth,
    pub asset_id: String,
    /// Monthly excess return as a decimal fraction.
    pub excess_return: f64,
    pub market_cap: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct AssetHistory {
    start: YearMonth,
    returns: Vec<f64>,
    caps: Vec<f64>,
}

impl AssetHistory {
    fn end(&self) -> YearMonth {
        self.start.add_months(self.returns.len() as i32 - 1)
    }

    fn index_of(&self, date: YearMonth) -> Option<usize> {
        let k = date.months_since(self.start);
        (k >= 0 && (k as usize) < self.returns.len()).then_some(k as usize)
    }
}

/// Validated monthly excess returns and caps indexed by `(date, asset_id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsPanel {
    observations: Vec<Observation>,
    assets: BTreeMap<String, AssetHistory>,
    first: YearMonth,
    last: YearMonth,
}

impl ReturnsPanel {
    /// Sorts by `(date, asset_id)` and checks uniqueness, positive caps,
    /// finite returns and that each asset is contiguous over its span.
    pub fn from_observations(mut observations: Vec<Observation>) -> Result<Self, DataError> {
        if observations.is_empty() {
            return Err(DataError::Empty);
        }
        observations.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.asset_id.cmp(&b.asset_id)));
        for pair in observations.windows(2) {
            if pair[0].date == pair[1].date && pair[0].asset_id == pair[1].asset_id {
                return Err(DataError::DuplicateKey { date: pair[1].date, asset_id: pair[1].asset_id.clone() });
            }
        }
        let mut assets: BTreeMap<String, AssetHistory> = BTreeMap::new();
        for obs in &observations {
            if !obs.excess_return.is_finite() {
                return Err(DataError::NonFinite { date: obs.date, field: "excess_return" });
            }
            if !(obs.market_cap > 0.0) || !obs.market_cap.is_finite() {
                return Err(DataError::NonPositiveCap {
                    date: obs.date,
                    asset_id: obs.asset_id.clone(),
                    value: obs.market_cap,
                });
            }
            match assets.get_mut(&obs.asset_id) {
                Some(h) => {
                    let expected = h.end().succ();
                    if obs.date != expected {
                        return Err(DataError::Gap { asset_id: Some(obs.asset_id.clone()), missing: expected });
                    }
                    h.returns.push(obs.excess_return);
                    h.caps.push(obs.market_cap);
                }
                None => {
                    assets.insert(
                        obs.asset_id.clone(),
                        AssetHistory {
                            start: obs.date,
                            returns: alloc::vec![obs.excess_return],
                            caps: alloc::vec![obs.market_cap],
                        },
                    );
                }
            }
        }
        let first = observations[0].date;
        let last = observations[observations.len() - 1].date;
        Ok(Self { observations, assets, first, last })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn first_date(&self) -> YearMonth {
        self.first
    }

    pub fn last_date(&self) -> YearMonth {
        self.last
    }

    pub fn asset_count(&self) -> usize {
        self.assets.len()
    }

    pub fn asset_ids(&self) -> impl Iterator<Item = &str> {
        self.assets.keys().map(String::as_str)
    }

    pub fn return_at(&self, asset_id: &str, date: YearMonth) -> Option<f64> {
        let h = self.assets.get(asset_id)?;
        h.index_of(date).map(|k| h.returns[k])
    }

    pub fn cap_at(&self, asset_id: &str, date: YearMonth) -> Option<f64> {
        let h = self.assets.get(asset_id)?;
        h.index_of(date).map(|k| h.caps[k])
    }

    /// Number of assets with an observation at `date`.
    pub fn assets_at(&self, date: YearMonth) -> usize {
        self.assets.values().filter(|h| h.index_of(date).is_some()).count()
    }

    /// Number of assets with a complete `window_len` history ending the
    /// month before `date`.
    pub fn eligible_count(&self, date: YearMonth, window_len: usize) -> usize {
        let from = date.add_months(-(window_len as i32));
        let to = date.pred();
        self.assets.values().filter(|h| h.start <= from && h.end() >= to).count()
    }
}

/// Market excess returns on a contiguous monthly grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSeries {
    start: YearMonth,
    values: Vec<f64>,
}

impl MarketSeries {
    pub fn from_rows(mut rows: Vec<(YearMonth, f64)>) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in rows.windows(2) {
            match pair[1].0.months_since(pair[0].0) {
                0 => return Err(DataError::DuplicateDate(pair[1].0)),
                1 => {}
                _ => return Err(DataError::Gap { asset_id: None, missing: pair[0].0.succ() }),
            }
        }
        if let Some((d, _)) = rows.iter().find(|(_, v)| !v.is_finite()) {
            return Err(DataError::NonFinite { date: *d, field: "market_excess_return" });
        }
        Ok(Self { start: rows[0].0, values: rows.into_iter().map(|r| r.1).collect() })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn first_date(&self) -> YearMonth {
        self.start
    }

    pub fn last_date(&self) -> YearMonth {
        self.start.add_months(self.values.len() as i32 - 1)
    }

    pub fn get(&self, date: YearMonth) -> Option<f64> {
        let k = date.months_since(self.start);
        (k >= 0).then(|| self.values.get(k as usize).copied()).flatten()
    }

    /// The `len` values for months `end - len .. end - 1`.
    pub fn window(&self, end: YearMonth, len: usize) -> Result<&[f64], DataError> {
        let from = end.add_months(-(len as i32));
        if from < self.start {
            return Err(DataError::MissingMarket(from));
        }
        if end.pred() > self.last_date() {
            return Err(DataError::MissingMarket(self.last_date().succ()));
        }
        let k = from.months_since(self.start) as usize;
        Ok(&self.values[k..k + len])
    }

    pub fn rows(&self) -> impl Iterator<Item = (YearMonth, f64)> + '_ {
        self.values.iter().enumerate().map(|(k, v)| (self.start.add_months(k as i32), *v))
    }

    pub fn covers(&self, from: YearMonth, to: YearMonth) -> bool {
        from >= self.start && to <= self.last_date()
    }
}

/// The assets chosen at a rebalance date together with their trailing
/// return window. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct UniverseSnapshot {
    date: YearMonth,
    asset_ids: Vec<String>,
    /// `n × T`, row `i` is asset `i`'s returns in chronological order.
    window: Matrix,
    caps: Vec<f64>,
}

impl UniverseSnapshot {
    pub fn new(date: YearMonth, asset_ids: Vec<String>, window: Matrix, caps: Vec<f64>) -> Result<Self, DataError> {
        if asset_ids.is_empty() {
            return Err(DataError::Empty);
        }
        if window.rows() != asset_ids.len() || caps.len() != asset_ids.len() {
            return Err(DataError::InvalidArgument("snapshot dimensions disagree"));
        }
        if let Some(i) = caps.iter().position(|c| !(*c > 0.0)) {
            return Err(DataError::NonPositiveCap { date, asset_id: asset_ids[i].clone(), value: caps[i] });
        }
        Ok(Self { date, asset_ids, window, caps })
    }

    pub fn date(&self) -> YearMonth {
        self.date
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    pub fn window(&self) -> &Matrix {
        &self.window
    }

    pub fn caps(&self) -> &[f64] {
        &self.caps
    }

    pub fn n_assets(&self) -> usize {
        self.asset_ids.len()
    }

    pub fn window_len(&self) -> usize {
        self.window.cols()
    }
}

/// Picks the `n` largest assets (by cap at `date - 1`) among those with a
/// full `window_len`-month history ending at `date - 1`.
///
/// Nothing dated `date` or later is read. Ties on cap are broken by
/// ascending asset id.
pub fn select_universe(
    panel: &ReturnsPanel,
    date: YearMonth,
    window_len: usize,
    n: usize,
) -> Result<UniverseSnapshot, DataError> {
    if window_len == 0 {
        return Err(DataError::InvalidArgument("window_len must be positive"));
    }
    if n < 2 {
        return Err(DataError::InvalidArgument("universe size must be at least 2"));
    }
    let from = date.add_months(-(window_len as i32));
    let available = date.months_since(panel.first).max(0) as usize;
    if available < window_len {
        return Err(DataError::InsufficientHistory { date, required: window_len, available });
    }
    let to = date.pred();
    let mut eligible: Vec<(&String, &AssetHistory, f64)> = panel
        .assets
        .iter()
        .filter(|(_, h)| h.start <= from && h.end() >= to)
        .map(|(id, h)| (id, h, h.caps[h.index_of(to).expect("span checked")]))
        .collect();
    if eligible.len() < n {
        return Err(DataError::InsufficientUniverse { date, requested: n, eligible: eligible.len() });
    }
    eligible.sort_by(|a, b| match b.2.partial_cmp(&a.2) {
        Some(Ordering::Equal) | None => a.0.cmp(b.0),
        Some(o) => o,
    });
    eligible.truncate(n);

    let mut window = Matrix::zeros(n, window_len);
    let mut ids = Vec::with_capacity(n);
    let mut caps = Vec::with_capacity(n);
    for (i, (id, h, cap)) in eligible.into_iter().enumerate() {
        let k = h.index_of(from).expect("span checked");
        window.row_mut(i).copy_from_slice(&h.returns[k..k + window_len]);
        ids.push(id.clone());
        caps.push(cap);
    }
    Ok(UniverseSnapshot { date, asset_ids: ids, window, caps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;

    fn ym(s: &str) -> YearMonth {
        s.parse().unwrap()
    }

    fn obs(date: &str, id: &str, r: f64, cap: f64) -> Observation {
        Observation { date: ym(date), asset_id: id.to_string(), excess_return: r, market_cap: cap }
    }

    fn dense_panel(n_assets: usize, months: usize, start: &str) -> ReturnsPanel {
        let start = ym(start);
        let mut rows = Vec::new();
        for a in 0..n_assets {
            for t in 0..months {
                rows.push(Observation {
                    date: start.add_months(t as i32),
                    asset_id: format!("A{a}"),
                    excess_return: 0.001 * (a as f64 + 1.0) * ((t % 7) as f64 - 3.0),
                    market_cap: 100.0 * (a as f64 + 1.0),
                });
            }
        }
        ReturnsPanel::from_observations(rows).unwrap()
    }

    #[test]
    fn three_rows_parse() {
        let p = ReturnsPanel::from_observations(vec![
            obs("2020-02", "B", 0.01, 1.0),
            obs("2020-01", "A", 0.02, 2.0),
            obs("2020-01", "B", -0.01, 1.0),
        ])
        .unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.observations()[0].asset_id, "A");
        assert_eq!(p.observations()[2].date, ym("2020-02"));
    }

    #[test]
    fn duplicate_key_names_pair() {
        let err = ReturnsPanel::from_observations(vec![obs("2020-01", "AAPL", 0.0, 1.0), obs("2020-01", "AAPL", 0.1, 1.0)])
            .unwrap_err();
        assert_eq!(err, DataError::DuplicateKey { date: ym("2020-01"), asset_id: "AAPL".into() });
        assert!(err.to_string().contains("(2020-01, AAPL)"));
    }

    #[test]
    fn negative_cap_rejected() {
        let err = ReturnsPanel::from_observations(vec![obs("2020-01", "X", 0.0, -5.0)]).unwrap_err();
        assert!(matches!(err, DataError::NonPositiveCap { value, .. } if value == -5.0));
    }

    #[test]
    fn asset_gap_rejected() {
        let err = ReturnsPanel::from_observations(vec![obs("2020-01", "X", 0.0, 1.0), obs("2020-03", "X", 0.0, 1.0)])
            .unwrap_err();
        assert_eq!(err, DataError::Gap { asset_id: Some("X".into()), missing: ym("2020-02") });
    }

    #[test]
    fn market_series_validation() {
        let rows: Vec<_> = (0..12).map(|k| (ym("2020-01").add_months(k), 0.01)).collect();
        assert_eq!(MarketSeries::from_rows(rows).unwrap().len(), 12);
        let err = MarketSeries::from_rows(vec![(ym("2020-01"), 0.0), (ym("2020-03"), 0.0)]).unwrap_err();
        assert_eq!(err, DataError::Gap { asset_id: None, missing: ym("2020-02") });
        assert!(err.to_string().contains("2020-02"));
        assert_eq!(MarketSeries::from_rows(vec![]).unwrap_err(), DataError::Empty);
        let dup = MarketSeries::from_rows(vec![(ym("2020-01"), 0.0), (ym("2020-01"), 0.0)]).unwrap_err();
        assert_eq!(dup, DataError::DuplicateDate(ym("2020-01")));
    }

    #[test]
    fn market_window_excludes_end() {
        let rows: Vec<_> = (0..12).map(|k| (ym("2020-01").add_months(k), k as f64)).collect();
        let m = MarketSeries::from_rows(rows).unwrap();
        assert_eq!(m.window(ym("2020-06"), 3).unwrap(), &[2.0, 3.0, 4.0]);
        assert!(m.window(ym("2020-02"), 3).is_err());
        assert!(m.window(ym("2021-02"), 3).is_err());
        assert!(m.window(ym("2021-01"), 3).is_ok());
    }

    #[test]
    fn picks_largest_caps_in_order() {
        let p = dense_panel(5, 30, "2000-01");
        let s = select_universe(&p, ym("2002-01"), 24, 3).unwrap();
        assert_eq!(s.asset_ids(), &["A4", "A3", "A2"]);
        assert_eq!(s.caps(), &[500.0, 400.0, 300.0]);
        assert_eq!(s.window_len(), 24);
        // last window column is 2001-12
        assert_eq!(s.window()[(0, 23)], p.return_at("A4", ym("2001-12")).unwrap());
    }

    #[test]
    fn cap_ties_broken_by_id() {
        let mut rows = Vec::new();
        for id in ["C", "A", "B"] {
            for t in 0..3 {
                rows.push(obs(&ym("2000-01").add_months(t).to_string(), id, 0.0, 7.0));
            }
        }
        let p = ReturnsPanel::from_observations(rows).unwrap();
        let s = select_universe(&p, ym("2000-04"), 3, 3).unwrap();
        assert_eq!(s.asset_ids(), &["A", "B", "C"]);
    }

    #[test]
    fn incomplete_history_is_ineligible() {
        let p = dense_panel(3, 70, "2000-01");
        // drop one month (t-7) for the biggest asset by rebuilding it as two listings
        let date = ym("2000-01").add_months(65);
        let hole = date.add_months(-7);
        let rows: Vec<Observation> = p
            .observations()
            .iter()
            .filter(|o| !(o.asset_id == "A2" && o.date <= hole))
            .cloned()
            .collect();
        let p = ReturnsPanel::from_observations(rows).unwrap();
        let err = select_universe(&p, date, 60, 3).unwrap_err();
        assert_eq!(err, DataError::InsufficientUniverse { date, requested: 3, eligible: 2 });
        let s = select_universe(&p, date, 60, 2).unwrap();
        assert_eq!(s.asset_ids(), &["A1", "A0"]);
    }

    #[test]
    fn insufficient_universe_reports_count() {
        let p = dense_panel(8, 10, "2000-01");
        let err = select_universe(&p, ym("2000-08"), 6, 10).unwrap_err();
        assert_eq!(err, DataError::InsufficientUniverse { date: ym("2000-08"), requested: 10, eligible: 8 });
    }

    #[test]
    fn insufficient_history() {
        let p = dense_panel(3, 10, "2000-01");
        assert!(matches!(
            select_universe(&p, ym("2000-05"), 6, 2),
            Err(DataError::InsufficientHistory { required: 6, available: 4, .. })
        ));
    }

    #[test]
    fn future_rows_do_not_matter() {
        let p = dense_panel(6, 40, "2000-01");
        let date = ym("2002-06");
        let before = select_universe(&p, date, 24, 4).unwrap();
        let mutated: Vec<Observation> = p
            .observations()
            .iter()
            .map(|o| {
                let mut o = o.clone();
                if o.date >= date {
                    o.excess_return = 9.0;
                    o.market_cap = 1e12 / (1.0 + o.excess_return);
                }
                o
            })
            .collect();
        let after = select_universe(&ReturnsPanel::from_observations(mutated).unwrap(), date, 24, 4).unwrap();
        assert_eq!(before, after);
        assert_eq!(before, select_universe(&p, date, 24, 4).unwrap());
    }
}
