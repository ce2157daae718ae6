use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use divrisk::config::{RunConfig, FALLBACK_OUTPUT_DIR, OUTPUT_DIR_ENV};
use divrisk::io;
use divrisk::report::coverage;
use divrisk::run::{execute, RunOptions, EXIT_CONFIG, EXIT_DATA};
use divrisk_core::synthetic::{generate_synthetic_panel, SyntheticSpec};
use divrisk_core::YearMonth;

#[derive(Parser)]
#[command(name = "divrisk", version, about = "Backtests of diversification-oriented portfolios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the backtest matrix described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config and the environment.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write each model's covariance matrix at this month (YYYY-MM).
        #[arg(long, value_name = "MONTH")]
        dump_covariance: Option<YearMonth>,
        /// Write optimizer iteration traces at this month (YYYY-MM).
        #[arg(long, value_name = "MONTH")]
        dump_trace: Option<YearMonth>,
    },
    /// Generate a synthetic single-factor panel.
    Synth {
        #[arg(long, default_value_t = SyntheticSpec::default().n_assets)]
        assets: usize,
        #[arg(long, default_value_t = SyntheticSpec::default().n_months)]
        months: usize,
        #[arg(long, default_value_t = SyntheticSpec::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = SyntheticSpec::default().start)]
        start: YearMonth,
        /// Directory for returns.csv, market.csv and ground_truth.csv.
        #[arg(long, env = OUTPUT_DIR_ENV, default_value = FALLBACK_OUTPUT_DIR)]
        out: PathBuf,
    },
    /// Report data coverage for the configured periods.
    Validate {
        #[arg(long)]
        returns: PathBuf,
        #[arg(long)]
        market: PathBuf,
        /// Take periods, window and universe size from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let code = match Cli::parse().command {
        Command::Run { config, output, dump_covariance, dump_trace } => cmd_run(config, output, dump_covariance, dump_trace),
        Command::Synth { assets, months, seed, start, out } => cmd_synth(assets, months, seed, start, out),
        Command::Validate { returns, market, config } => cmd_validate(returns, market, config),
    };
    ExitCode::from(code as u8)
}

fn cmd_run(config: PathBuf, output: Option<PathBuf>, dump_covariance: Option<YearMonth>, dump_trace: Option<YearMonth>) -> i32 {
    let cfg = match RunConfig::load(&config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("invalid configuration {}:\n{e}", config.display());
            return EXIT_CONFIG;
        }
    };
    let opts = RunOptions { output_dir: output, dump_covariance, dump_trace };
    match execute(&cfg, &opts) {
        Ok(report) => {
            println!("wrote {} files to {}", report.files.len(), report.output_dir.display());
            for f in &report.expected_failures {
                eprintln!("NaN {} / {} / {}: {}", f.period, f.model, f.strategy, f.reason);
            }
            if !report.hard_failures.is_empty() {
                eprintln!("{} combinations failed:", report.hard_failures.len());
                for f in &report.hard_failures {
                    eprintln!("  {} / {} / {}: {}", f.period, f.model, f.strategy, f.reason);
                }
            }
            report.exit_code()
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn cmd_synth(assets: usize, months: usize, seed: u64, start: YearMonth, out: PathBuf) -> i32 {
    let spec = SyntheticSpec { n_assets: assets, n_months: months, seed, start, ..SyntheticSpec::default() };
    let (panel, market, truth) = match generate_synthetic_panel(&spec) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("invalid synthetic spec: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Err(e) = std::fs::create_dir_all(&out) {
        eprintln!("cannot create {}: {e}", out.display());
        return 1;
    }
    let written = io::write_returns_panel(&panel, &out.join("returns.csv"))
        .and_then(|_| io::write_market_series(&market, &out.join("market.csv")))
        .and_then(|_| io::write_ground_truth(&truth, &out.join("ground_truth.csv")));
    match written {
        Ok(()) => {
            println!("wrote returns.csv, market.csv and ground_truth.csv to {}", out.display());
            0
        }
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}

fn cmd_validate(returns: PathBuf, market: PathBuf, config: Option<PathBuf>) -> i32 {
    let cfg = match config.as_deref().map(RunConfig::load).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => {
            eprintln!("invalid configuration:\n{e}");
            return EXIT_CONFIG;
        }
    };
    let run = match cfg.validate() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("invalid configuration:\n{e}");
            return EXIT_CONFIG;
        }
    };
    let loaded = io::load_returns_panel(&returns).and_then(|p| io::load_market_series(&market).map(|m| (p, m)));
    let (panel, market) = match loaded {
        Ok(v) => v,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_DATA;
        }
    };
    let c = coverage(&panel, &market, &run.periods, run.engine.window_len, run.engine.universe_size);
    print!("{}", c.text);
    for w in &c.warnings {
        println!("warning: {w}");
    }
    0
}
