//! Result files: metrics tables, cumulative-return series and charts, the
//! long-format surface export and the optional debug dumps.

use std::fmt::Write as _;
use std::path::Path;

use divrisk_core::backtest::{BacktestResult, MatrixOutput, PeriodSpec};
use divrisk_core::linalg::Matrix;
use divrisk_core::metrics::MetricsRow;
use divrisk_core::qpsolve::IterationTrace;
use divrisk_core::riskmodels::ModelKind;
use divrisk_core::strategies::StrategyKind;
use divrisk_core::YearMonth;

use crate::io::IoError;

fn csv_to_string(rows: &[Vec<String>]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn find<'a>(out: &'a MatrixOutput, period: &str, model: ModelKind, strategy: StrategyKind) -> Option<&'a BacktestResult> {
    out.results.iter().find(|r| r.period.name == period && r.model == model && r.strategy == strategy)
}

fn metrics_of(out: &MatrixOutput, period: &str, model: ModelKind, strategy: StrategyKind) -> MetricsRow {
    out.rows
        .iter()
        .find(|r| r.period == period && r.model == model && r.strategy == strategy)
        .map(|r| r.metrics)
        .unwrap_or_else(MetricsRow::nan)
}

pub fn metrics_file_name(period: &str, model: ModelKind) -> String {
    format!("metrics_{period}_{}.csv", model.id())
}

pub fn cumret_file_name(period: &str, model: ModelKind) -> String {
    format!("cumret_{period}_{}.csv", model.id())
}

pub fn chart_file_name(period: &str, model: ModelKind) -> String {
    format!("cumret_{period}_{}.svg", model.id())
}

/// One row per metric, one column per strategy, laid out like the
/// published tables. NaN cells are written as `NaN`.
pub fn metrics_csv(out: &MatrixOutput, period: &str, model: ModelKind, strategies: &[StrategyKind]) -> String {
    let mut rows = vec![std::iter::once("metric".to_string()).chain(strategies.iter().map(|s| s.label().to_string())).collect()];
    let values: Vec<[f64; 6]> = strategies.iter().map(|&s| metrics_of(out, period, model, s).values()).collect();
    for (k, label) in MetricsRow::LABELS.iter().enumerate() {
        rows.push(std::iter::once(label.to_string()).chain(values.iter().map(|v| format!("{}", v[k]))).collect());
    }
    csv_to_string(&rows)
}

/// `∏(1 + r) − 1` after each month.
pub fn compound(returns: &[f64]) -> Vec<f64> {
    let mut growth = 1.0;
    returns
        .iter()
        .map(|r| {
            growth *= 1.0 + r;
            growth - 1.0
        })
        .collect()
}

/// Column per strategy; a failed combination is a column of NaN.
pub fn cumret_csv(out: &MatrixOutput, period: &PeriodSpec, model: ModelKind, strategies: &[StrategyKind]) -> String {
    let dates: Vec<YearMonth> = period.months().collect();
    let cols: Vec<Vec<f64>> = strategies
        .iter()
        .map(|&s| match find(out, &period.name, model, s) {
            Some(r) if !r.failed && r.dates == dates => compound(&r.monthly_returns),
            _ => vec![f64::NAN; dates.len()],
        })
        .collect();
    let mut rows = vec![std::iter::once("date".to_string()).chain(strategies.iter().map(|s| s.id().to_string())).collect()];
    for (i, d) in dates.iter().enumerate() {
        rows.push(std::iter::once(d.to_string()).chain(cols.iter().map(|c| format!("{}", c[i]))).collect());
    }
    csv_to_string(&rows)
}

/// `period,model,strategy,avg_excess_return,std_dev,sharpe` for every row.
pub fn surface_csv(out: &MatrixOutput) -> String {
    let mut rows = vec![["period", "model", "strategy", "avg_excess_return", "std_dev", "sharpe"].map(String::from).to_vec()];
    for r in &out.rows {
        rows.push(vec![
            r.period.clone(),
            r.model.id().to_string(),
            r.strategy.id().to_string(),
            format!("{}", r.metrics.avg_excess_return),
            format!("{}", r.metrics.std_dev),
            format!("{}", r.metrics.sharpe),
        ]);
    }
    csv_to_string(&rows)
}

/// `date,asset_id,weight` for every rebalance of one combination.
pub fn weights_csv(result: &BacktestResult) -> String {
    let mut rows = vec![["date", "asset_id", "weight"].map(String::from).to_vec()];
    for (d, w) in &result.weights_history {
        for (id, x) in w.asset_ids().iter().zip(w.weights()) {
            rows.push(vec![d.to_string(), id.clone(), format!("{x}")]);
        }
    }
    csv_to_string(&rows)
}

/// Row-major with the asset ids as header.
pub fn covariance_csv(ids: &[String], v: &Matrix) -> String {
    let mut rows = vec![ids.to_vec()];
    for i in 0..v.rows() {
        rows.push((0..v.cols()).map(|j| format!("{}", v[(i, j)])).collect());
    }
    csv_to_string(&rows)
}

pub fn trace_csv(trace: &[IterationTrace]) -> String {
    let mut rows = vec![["iteration", "objective", "primal_residual", "dual_residual", "complementarity", "mu", "step"]
        .map(String::from)
        .to_vec()];
    for t in trace {
        rows.push(vec![
            t.iteration.to_string(),
            format!("{}", t.objective),
            format!("{}", t.primal_residual),
            format!("{}", t.dual_residual),
            format!("{}", t.complementarity),
            format!("{}", t.mu),
            format!("{}", t.step),
        ]);
    }
    csv_to_string(&rows)
}

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 520.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 230.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;

fn color(s: StrategyKind) -> &'static str {
    match s {
        StrategyKind::ValueWeighted => "#1f77b4",
        StrategyKind::EqualWeighted => "#ff7f0e",
        StrategyKind::MinVariance => "#2ca02c",
        StrategyKind::MaxDiversification => "#d62728",
        StrategyKind::RiskParity => "#9467bd",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Tick spacing of 1, 2 or 5 times a power of ten giving about `target` ticks.
fn tick_step(span: f64, target: f64) -> f64 {
    let raw = span / target;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

/// Line chart of compounded excess returns, one polyline per strategy that
/// has a result. Failed combinations are listed in the legend as `n/a`.
pub fn cumret_svg(out: &MatrixOutput, period: &PeriodSpec, model: ModelKind, strategies: &[StrategyKind]) -> String {
    let dates: Vec<YearMonth> = period.months().collect();
    let series: Vec<(StrategyKind, Option<Vec<f64>>)> = strategies
        .iter()
        .map(|&s| {
            let c = find(out, &period.name, model, s)
                .filter(|r| !r.failed && r.dates == dates)
                .map(|r| std::iter::once(0.0).chain(compound(&r.monthly_returns)).collect());
            (s, c)
        })
        .collect();

    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for v in series.iter().filter_map(|(_, c)| c.as_ref()).flatten() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if hi - lo < 1e-9 {
        hi = lo + 0.01;
    }
    let step = tick_step(hi - lo, 6.0);
    let lo = (lo / step).floor() * step;
    let hi = (hi / step).ceil() * step;
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let n = dates.len().max(1) as f64;
    let px = |i: usize| LEFT + plot_w * i as f64 / n;
    let py = |v: f64| TOP + plot_h * (hi - v) / (hi - lo);

    let mut s = String::new();
    let title = format!("{} - Portfolios Comparison - {}", model.label(), period.name);
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(&title));
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="28" text-anchor="middle" font-size="16">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(&title)
    );

    // y grid and labels
    let mut v = lo;
    while v <= hi + step * 1e-6 {
        let y = py(v);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##, LEFT + plot_w);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.0}%</text>"#,
            LEFT - 6.0,
            y + 4.0,
            (v * 100.0).round() + 0.0
        );
        v += step;
    }
    // x ticks: first month and every January after it, thinned to about eight labels
    let years: Vec<usize> = (0..dates.len()).filter(|&i| i == 0 || dates[i].month() == 1).collect();
    let every = years.len().div_ceil(8).max(1);
    for &i in years.iter().step_by(every) {
        let x = px(i);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
            TOP + plot_h,
            TOP + plot_h + 5.0
        );
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, TOP + plot_h + 20.0, dates[i]);
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Date</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">Cumulative Excess Return</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    for (k, (strategy, c)) in series.iter().enumerate() {
        let ly = TOP + 20.0 + 22.0 * k as f64;
        let lx = LEFT + plot_w + 15.0;
        let label = match c {
            Some(c) => {
                let pts: Vec<String> = c.iter().enumerate().map(|(i, v)| format!("{:.2},{:.2}", px(i), py(*v))).collect();
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                    color(*strategy),
                    pts.join(" ")
                );
                let _ = writeln!(
                    s,
                    r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="3"/>"#,
                    lx + 20.0,
                    color(*strategy)
                );
                strategy.label().to_string()
            }
            None => format!("{} (n/a)", strategy.label()),
        };
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&label));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `contents` into `dir/name`.
pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), IoError> {
    crate::io::write_text(&dir.join(name), contents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use divrisk_core::backtest::MatrixRow;
    use divrisk_core::strategies::PortfolioWeights;

    fn ym(s: &str) -> YearMonth {
        s.parse().unwrap()
    }

    fn toy() -> (MatrixOutput, PeriodSpec) {
        let period = PeriodSpec::new("P", ym("2001-01"), ym("2001-04")).unwrap();
        let dates: Vec<YearMonth> = period.months().collect();
        let w = PortfolioWeights::new(vec!["a".to_string(), "b".to_string()], vec![0.5, 0.5]).unwrap();
        let ok = BacktestResult {
            period: period.clone(),
            model: ModelKind::ShrunkSample,
            strategy: StrategyKind::EqualWeighted,
            dates: dates.clone(),
            monthly_returns: vec![0.1, -0.1, 0.0],
            weights_history: dates.iter().map(|d| (*d, w.clone())).collect(),
            failed: false,
            failure: None,
        };
        let bad = BacktestResult {
            strategy: StrategyKind::RiskParity,
            dates: vec![],
            monthly_returns: vec![],
            weights_history: vec![],
            failed: true,
            failure: Some("not PD".into()),
            ..ok.clone()
        };
        let row = |s, m| MatrixRow { period: "P".into(), model: ModelKind::ShrunkSample, strategy: s, metrics: m };
        let metrics = MetricsRow {
            avg_excess_return: 0.1,
            std_dev: 0.2,
            sharpe: 0.5,
            market_beta: 1.0,
            avg_positions: 2.0,
            effective_n: 2.0,
        };
        let out = MatrixOutput {
            rows: vec![row(StrategyKind::EqualWeighted, metrics), row(StrategyKind::RiskParity, MetricsRow::nan())],
            results: vec![ok, bad],
            failures: vec![],
        };
        (out, period)
    }

    #[test]
    fn compounding() {
        let c = compound(&[0.1, -0.1, 0.0]);
        assert!((c[1] - (1.1 * 0.9 - 1.0)).abs() < 1e-15);
        assert_eq!(c[1], c[2]);
    }

    #[test]
    fn metrics_table_layout_and_nan() {
        let (out, _) = toy();
        let kinds = [StrategyKind::EqualWeighted, StrategyKind::RiskParity];
        let text = metrics_csv(&out, "P", ModelKind::ShrunkSample, &kinds);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "metric,Equal Weighted,Risk Parity");
        assert_eq!(lines[3], "Sharpe Ratio,0.5,NaN");
    }

    #[test]
    fn cumret_has_nan_column_for_failure() {
        let (out, period) = toy();
        let kinds = [StrategyKind::EqualWeighted, StrategyKind::RiskParity];
        let text = cumret_csv(&out, &period, ModelKind::ShrunkSample, &kinds);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "date,equal_weighted,risk_parity");
        assert_eq!(lines[1], "2001-01,0.10000000000000009,NaN");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn svg_has_one_polyline_per_plotted_strategy() {
        let (out, period) = toy();
        let kinds = [StrategyKind::EqualWeighted, StrategyKind::RiskParity];
        let svg = cumret_svg(&out, &period, ModelKind::ShrunkSample, &kinds);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("Shrunk Sample Covariance Matrix - Portfolios Comparison - P"));
        assert!(svg.contains("Risk Parity (n/a)"));
    }

    #[test]
    fn ticks() {
        assert_eq!(tick_step(1.0, 5.0), 0.2);
        assert_eq!(tick_step(0.3, 6.0), 0.05);
    }
}
