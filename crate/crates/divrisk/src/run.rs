//! The `run` command: load data, run the backtest matrix, write results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use divrisk_core::backtest::{run_matrix, BacktestError, Failure, MatrixOutput};
use divrisk_core::data::{select_universe, MarketSeries, ReturnsPanel};
use divrisk_core::riskmodels::{estimate, DEFAULT_DENSE_CAP};
use divrisk_core::strategies::qp_trace;
use divrisk_core::synthetic::generate_synthetic_panel;
use divrisk_core::YearMonth;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigErrors, ResolvedRun, RunConfig};
use crate::exec::RayonExecutor;
use crate::io::{self, IoError};
use crate::output;

pub const MANIFEST: &str = "manifest.json";
pub const SURFACE: &str = "surface.csv";

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration:\n{0}")]
    Config(ConfigErrors),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Backtest(BacktestError),
    #[error("cannot write output: {0}")]
    Output(IoError),
    #[error("{0}")]
    Setup(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Data(_) => EXIT_DATA,
            RunError::Backtest(e) if e.is_data_error() => EXIT_DATA,
            RunError::Backtest(_) => EXIT_SOLVER,
            RunError::Output(_) | RunError::Setup(_) => 1,
        }
    }
}

impl From<IoError> for RunError {
    fn from(e: IoError) -> Self {
        RunError::Output(e)
    }
}

/// Debug switches that do not change the results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the configured output directory.
    pub output_dir: Option<PathBuf>,
    /// Write each model's covariance at this rebalance date.
    pub dump_covariance: Option<YearMonth>,
    /// Write the solver iterations of each optimizer at this date.
    pub dump_trace: Option<YearMonth>,
}

#[derive(Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    /// File names relative to `output_dir`, in write order.
    pub files: Vec<String>,
    pub matrix: MatrixOutput,
    /// Combinations left as NaN because the model cannot be used by the
    /// strategy (the shrunk model is not certified positive definite).
    pub expected_failures: Vec<Failure>,
    /// Any other NaN row.
    pub hard_failures: Vec<Failure>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.hard_failures.is_empty() {
            0
        } else {
            EXIT_SOLVER
        }
    }
}

#[derive(Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct FailureEntry<'a> {
    period: &'a str,
    model: &'a str,
    strategy: &'a str,
    reason: &'a str,
    expected: bool,
}

#[derive(Serialize)]
struct Manifest<'a> {
    program: &'static str,
    version: &'static str,
    config: String,
    data: BTreeMap<&'static str, FileHash>,
    outputs: &'a [String],
    failures: Vec<FailureEntry<'a>>,
    notes: [&'static str; 3],
    /// Excluded when comparing runs for reproducibility.
    wall_time_seconds: f64,
}

const NOTES: [&str; 3] = [
    "cumret files and charts compound monthly excess returns; metrics tables use arithmetic means",
    "periods are half-open [start, end)",
    "NaN metrics mark combinations that could not be computed; see failures",
];

fn sha256_file(path: &Path) -> Result<String, RunError> {
    let bytes = std::fs::read(path).map_err(|e| RunError::Data(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Loads the files named by the config, or generates the synthetic panel.
pub fn load_data(cfg: &RunConfig) -> Result<(ReturnsPanel, MarketSeries), RunError> {
    match (&cfg.data.returns, &cfg.data.market) {
        (Some(r), Some(m)) => {
            let panel = io::load_returns_panel(r).map_err(|e| RunError::Data(e.to_string()))?;
            let market = io::load_market_series(m).map_err(|e| RunError::Data(e.to_string()))?;
            Ok((panel, market))
        }
        _ => {
            let (panel, market, _) =
                generate_synthetic_panel(&cfg.synthetic.spec()).map_err(|e| RunError::Data(e.to_string()))?;
            Ok((panel, market))
        }
    }
}

/// Validates, runs and writes everything. A returned report may still
/// carry failures; see [`RunReport::exit_code`].
pub fn execute(cfg: &RunConfig, opts: &RunOptions) -> Result<RunReport, RunError> {
    let started = Instant::now();
    let resolved = cfg.validate().map_err(RunError::Config)?;
    let (panel, market) = load_data(cfg)?;
    let executor = RayonExecutor::new(cfg.backtest.workers).map_err(|e| RunError::Setup(e.to_string()))?;
    let matrix = run_matrix(
        &panel,
        &market,
        &resolved.periods,
        &resolved.models,
        &resolved.strategies,
        &resolved.engine,
        &executor,
    )
    .map_err(RunError::Backtest)?;

    let dir = opts.output_dir.clone().unwrap_or_else(|| cfg.output_dir());
    std::fs::create_dir_all(&dir).map_err(|source| IoError::Io { path: dir.clone(), source })?;
    let mut files = Vec::new();
    let mut emit = |name: String, text: String| -> Result<(), RunError> {
        output::write_file(&dir, &name, &text)?;
        files.push(name);
        Ok(())
    };

    for period in &resolved.periods {
        for &model in &resolved.models {
            let s = &resolved.strategies;
            emit(output::metrics_file_name(&period.name, model), output::metrics_csv(&matrix, &period.name, model, s))?;
            emit(output::cumret_file_name(&period.name, model), output::cumret_csv(&matrix, period, model, s))?;
            if cfg.output.svg {
                emit(output::chart_file_name(&period.name, model), output::cumret_svg(&matrix, period, model, s))?;
            }
        }
    }
    emit(SURFACE.to_string(), output::surface_csv(&matrix))?;
    if cfg.output.dump_weights {
        for r in matrix.results.iter().filter(|r| !r.failed) {
            let name = format!("weights_{}_{}_{}.csv", r.period.name, r.model.id(), r.strategy.id());
            emit(name, output::weights_csv(r))?;
        }
    }
    for (name, text) in debug_dumps(&panel, &market, &resolved, opts)? {
        emit(name, text)?;
    }

    let failed = |f: &Failure| {
        matrix
            .results
            .iter()
            .any(|r| r.failed && r.period.name == f.period && r.model == f.model && r.strategy == f.strategy)
    };
    let (expected_failures, hard_failures): (Vec<Failure>, Vec<Failure>) =
        matrix.failures.iter().cloned().partition(|f| failed(f));

    let mut data = BTreeMap::new();
    if let (Some(r), Some(m)) = (&cfg.data.returns, &cfg.data.market) {
        data.insert("returns", FileHash { path: r.display().to_string(), sha256: sha256_file(r)? });
        data.insert("market", FileHash { path: m.display().to_string(), sha256: sha256_file(m)? });
    }
    // the echo reproduces the results wherever it is run; the output location is not part of it
    let mut echo = cfg.clone();
    echo.output.dir = None;
    let manifest = Manifest {
        program: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config: echo.to_toml(),
        data,
        outputs: &files,
        failures: matrix
            .failures
            .iter()
            .map(|f| FailureEntry {
                period: &f.period,
                model: f.model.id(),
                strategy: f.strategy.id(),
                reason: &f.reason,
                expected: failed(f),
            })
            .collect(),
        notes: NOTES,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    output::write_file(&dir, MANIFEST, &text)?;
    files.push(MANIFEST.to_string());

    Ok(RunReport { output_dir: dir, files, matrix, expected_failures, hard_failures })
}

fn debug_dumps(
    panel: &ReturnsPanel,
    market: &MarketSeries,
    run: &ResolvedRun,
    opts: &RunOptions,
) -> Result<Vec<(String, String)>, RunError> {
    let mut out = Vec::new();
    let mut dates: Vec<YearMonth> = opts.dump_covariance.iter().chain(opts.dump_trace.iter()).copied().collect();
    dates.dedup();
    if dates.is_empty() {
        return Ok(out);
    }
    let cfg = &run.engine;
    for date in dates {
        let snapshot =
            select_universe(panel, date, cfg.window_len, cfg.universe_size).map_err(|e| RunError::Data(format!("{date}: {e}")))?;
        let mwin = market.window(date, cfg.window_len).map_err(|e| RunError::Data(format!("{date}: {e}")))?;
        for &kind in &run.models {
            let model = estimate(kind, &snapshot, mwin, cfg.shrinkage, cfg.psd_repair)
                .map_err(|e| RunError::Setup(format!("{date}: {kind} model: {e}")))?;
            if opts.dump_covariance == Some(date) {
                let v = model.materialize(DEFAULT_DENSE_CAP).map_err(|e| RunError::Setup(e.to_string()))?;
                out.push((format!("covariance_{}_{date}.csv", kind.id()), output::covariance_csv(snapshot.asset_ids(), &v)));
            }
            if opts.dump_trace == Some(date) {
                for &s in run.strategies.iter().filter(|s| s.uses_model()) {
                    let trace = qp_trace(s, &model, &cfg.strategy).map_err(|e| RunError::Setup(e.to_string()))?;
                    if !trace.is_empty() {
                        out.push((format!("trace_{}_{}_{date}.csv", kind.id(), s.id()), output::trace_csv(&trace)));
                    }
                }
            }
        }
    }
    Ok(out)
}
