//! Run configuration, read from a TOML file with one section per stage.
//!
//! Every field has a default, so an empty file is a valid config: the
//! synthetic panel, the four default periods and all models and strategies.

use std::fmt;
use std::path::{Path, PathBuf};

use divrisk_core::backtest::{self, EngineConfig, PeriodSpec};
use divrisk_core::qpsolve::SolverSettings;
use divrisk_core::riskmodels::{ModelKind, MIN_WINDOW};
use divrisk_core::strategies::{StrategyConfig, StrategyKind};
use divrisk_core::synthetic::SyntheticSpec;
use divrisk_core::YearMonth;
use serde::{Deserialize, Serialize};

/// Used when neither the config nor the environment names an output directory.
pub const OUTPUT_DIR_ENV: &str = "DIVRISK_OUTPUT_DIR";
pub const FALLBACK_OUTPUT_DIR: &str = "divrisk-output";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub synthetic: SyntheticSection,
    pub riskmodels: RiskModelsSection,
    pub strategies: StrategiesSection,
    pub solver: SolverSection,
    pub backtest: BacktestSection,
    pub output: OutputSection,
}

/// Leave both paths unset to run on the synthetic panel.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub returns: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub market: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_assets: usize,
    pub n_months: usize,
    #[serde(with = "year_month")]
    pub start: YearMonth,
    pub sigma_f: f64,
    pub beta_range: [f64; 2],
    pub idio_vol_range: [f64; 2],
    pub cap_log_mean: f64,
    pub cap_log_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self::from(&SyntheticSpec::default())
    }
}

impl From<&SyntheticSpec> for SyntheticSection {
    fn from(s: &SyntheticSpec) -> Self {
        Self {
            n_assets: s.n_assets,
            n_months: s.n_months,
            start: s.start,
            sigma_f: s.sigma_f,
            beta_range: [s.beta_range.0, s.beta_range.1],
            idio_vol_range: [s.idio_vol_range.0, s.idio_vol_range.1],
            cap_log_mean: s.cap_log_mean,
            cap_log_sd: s.cap_log_sd,
            seed: s.seed,
        }
    }
}

impl SyntheticSection {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_assets: self.n_assets,
            n_months: self.n_months,
            start: self.start,
            sigma_f: self.sigma_f,
            beta_range: (self.beta_range[0], self.beta_range[1]),
            idio_vol_range: (self.idio_vol_range[0], self.idio_vol_range[1]),
            cap_log_mean: self.cap_log_mean,
            cap_log_sd: self.cap_log_sd,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskModelsSection {
    /// Any of `factor`, `constcorr`, `shrunk`.
    pub models: Vec<String>,
    /// Shrinkage intensity of the shrunk sample model; 1/3 when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shrinkage_delta: Option<f64>,
    /// Clip negative eigenvalues of the shrunk sample model.
    pub psd_repair: bool,
}

impl Default for RiskModelsSection {
    fn default() -> Self {
        Self { models: ModelKind::ALL.iter().map(|m| m.id().to_string()).collect(), shrinkage_delta: None, psd_repair: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategiesSection {
    pub strategies: Vec<String>,
    pub weight_cap: f64,
    pub rp_upper: f64,
}

impl Default for StrategiesSection {
    fn default() -> Self {
        let d = StrategyConfig::default();
        Self {
            strategies: StrategyKind::ALL.iter().map(|s| s.id().to_string()).collect(),
            weight_cap: d.weight_cap,
            rp_upper: d.rp_upper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverSettings::default();
        Self { tolerance: d.tolerance, max_iterations: d.max_iterations }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSection {
    pub window_len: usize,
    pub universe_size: usize,
    /// Threads used for rebalance dates. Results do not depend on it.
    pub workers: usize,
    /// Check optimizer dominance over the benchmarks at every date.
    pub check_invariants: bool,
    pub periods: Vec<PeriodSection>,
}

impl Default for BacktestSection {
    fn default() -> Self {
        Self {
            window_len: backtest::DEFAULT_WINDOW,
            universe_size: backtest::DEFAULT_UNIVERSE,
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            check_invariants: true,
            periods: backtest::default_periods().iter().map(PeriodSection::from).collect(),
        }
    }
}

/// Half-open `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodSection {
    pub name: String,
    #[serde(with = "year_month")]
    pub start: YearMonth,
    #[serde(with = "year_month")]
    pub end: YearMonth,
}

impl From<&PeriodSpec> for PeriodSection {
    fn from(p: &PeriodSpec) -> Self {
        Self { name: p.name.clone(), start: p.start, end: p.end }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Falls back to `$DIVRISK_OUTPUT_DIR`, then `divrisk-output`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub svg: bool,
    /// One long-format CSV of weights per combination.
    pub dump_weights: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: None, svg: true, dump_weights: false }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            synthetic: SyntheticSection::default(),
            riskmodels: RiskModelsSection::default(),
            strategies: StrategiesSection::default(),
            solver: SolverSection::default(),
            backtest: BacktestSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// Everything wrong with a config, one message per field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// A validated config with ids resolved.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub models: Vec<ModelKind>,
    pub strategies: Vec<StrategyKind>,
    pub periods: Vec<PeriodSpec>,
    pub engine: EngineConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigErrors> {
        toml::from_str(text).map_err(|e| ConfigErrors(vec![e.message().trim().to_string() + &span_note(text, e.span())]))
    }

    /// Reads `path`; relative data paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, ConfigErrors> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigErrors(vec![format!("cannot read {}: {e}", path.display())]))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.returns, &mut cfg.data.market].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn is_synthetic(&self) -> bool {
        self.data.returns.is_none() && self.data.market.is_none()
    }

    /// Output directory after applying the environment fallback.
    pub fn output_dir(&self) -> PathBuf {
        self.output.dir.clone().unwrap_or_else(|| {
            std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(FALLBACK_OUTPUT_DIR))
        })
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            window_len: self.backtest.window_len,
            universe_size: self.backtest.universe_size,
            strategy: StrategyConfig {
                weight_cap: self.strategies.weight_cap,
                rp_upper: self.strategies.rp_upper,
                solver: SolverSettings {
                    tolerance: self.solver.tolerance,
                    max_iterations: self.solver.max_iterations,
                    trace: false,
                },
            },
            shrinkage: self.riskmodels.shrinkage_delta,
            psd_repair: self.riskmodels.psd_repair,
            check_invariants: self.backtest.check_invariants,
        }
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<ResolvedRun, ConfigErrors> {
        let mut errs = Vec::new();

        match (&self.data.returns, &self.data.market) {
            (None, None) => {
                if let Err(e) = self.synthetic.spec().validate() {
                    errs.push(format!("synthetic: {e}"));
                }
            }
            (Some(r), Some(m)) => {
                for (field, p) in [("data.returns", r), ("data.market", m)] {
                    if !p.is_file() {
                        errs.push(format!("{field}: file {} does not exist", p.display()));
                    }
                }
            }
            (Some(_), None) => errs.push("data.market must be set together with data.returns".into()),
            (None, Some(_)) => errs.push("data.returns must be set together with data.market".into()),
        }

        let mut models = Vec::new();
        if self.riskmodels.models.is_empty() {
            errs.push("riskmodels.models must name at least one model".into());
        }
        for id in &self.riskmodels.models {
            match ModelKind::from_id(id) {
                Some(m) if models.contains(&m) => errs.push(format!("riskmodels.models lists {id:?} twice")),
                Some(m) => models.push(m),
                None => errs.push(format!(
                    "riskmodels.models: unknown model {id:?} (expected one of {})",
                    ModelKind::ALL.map(|m| m.id()).join(", ")
                )),
            }
        }
        if let Some(d) = self.riskmodels.shrinkage_delta {
            if !(0.0..=1.0).contains(&d) {
                errs.push(format!("riskmodels.shrinkage_delta must be in [0, 1] (got {d})"));
            }
        }

        let mut strategies = Vec::new();
        if self.strategies.strategies.is_empty() {
            errs.push("strategies.strategies must name at least one strategy".into());
        }
        for id in &self.strategies.strategies {
            match StrategyKind::from_id(id) {
                Some(s) if strategies.contains(&s) => errs.push(format!("strategies.strategies lists {id:?} twice")),
                Some(s) => strategies.push(s),
                None => errs.push(format!(
                    "strategies.strategies: unknown strategy {id:?} (expected one of {})",
                    StrategyKind::ALL.map(|s| s.id()).join(", ")
                )),
            }
        }
        let cap = self.strategies.weight_cap;
        if !(cap > 0.0 && cap <= 1.0) {
            errs.push(format!("strategies.weight_cap must be in (0, 1] (got {cap})"));
        }
        let d = self.strategies.rp_upper;
        if !(d > 0.0 && d.is_finite()) {
            errs.push(format!("strategies.rp_upper must be positive (got {d})"));
        }

        let tol = self.solver.tolerance;
        if !(tol > 0.0 && tol.is_finite()) {
            errs.push(format!("solver.tolerance must be positive (got {tol})"));
        }
        if self.solver.max_iterations == 0 {
            errs.push("solver.max_iterations must be at least 1".into());
        }

        let bt = &self.backtest;
        if bt.window_len < MIN_WINDOW {
            errs.push(format!("backtest.window_len must be at least {MIN_WINDOW} (got {})", bt.window_len));
        }
        if bt.universe_size < 2 {
            errs.push(format!("backtest.universe_size must be at least 2 (got {})", bt.universe_size));
        } else if cap > 0.0 && (bt.universe_size as f64) * cap < 1.0 && self.uses_capped(&strategies) {
            errs.push(format!(
                "backtest.universe_size {} is too small for strategies.weight_cap {cap}: need n·u >= 1",
                bt.universe_size
            ));
        }
        if bt.workers == 0 {
            errs.push("backtest.workers must be at least 1".into());
        }
        let mut periods = Vec::new();
        if bt.periods.is_empty() {
            errs.push("backtest.periods must contain at least one period".into());
        }
        for (i, p) in bt.periods.iter().enumerate() {
            if p.name.is_empty() || !p.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                errs.push(format!(
                    "backtest.periods[{i}].name {:?} must be non-empty and use only letters, digits, '-' or '_'",
                    p.name
                ));
            } else if bt.periods[..i].iter().any(|q| q.name == p.name) {
                errs.push(format!("backtest.periods[{i}].name {:?} is used twice", p.name));
            }
            match PeriodSpec::new(p.name.clone(), p.start, p.end) {
                Ok(spec) => periods.push(spec),
                Err(_) => errs.push(format!("backtest.periods[{i}]: start {} must be before end {}", p.start, p.end)),
            }
        }

        if errs.is_empty() {
            Ok(ResolvedRun { models, strategies, periods, engine: self.engine_config() })
        } else {
            Err(ConfigErrors(errs))
        }
    }

    fn uses_capped(&self, strategies: &[StrategyKind]) -> bool {
        strategies.iter().any(|s| matches!(s, StrategyKind::MinVariance | StrategyKind::MaxDiversification))
    }
}

fn span_note(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

mod year_month {
    use divrisk_core::YearMonth;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &YearMonth, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(d)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<YearMonth, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|e| D::Error::custom(format!("invalid month {s:?}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        let run = cfg.validate().unwrap();
        assert_eq!(run.models.len(), 3);
        assert_eq!(run.strategies.len(), 5);
        assert_eq!(run.periods.len(), 4);
        assert_eq!(run.engine.window_len, 60);
        assert_eq!(run.engine.universe_size, 1000);
        assert_eq!(run.engine.strategy.weight_cap, 0.05);
        assert_eq!(run.engine.strategy.rp_upper, 5.0);
        assert!(cfg.is_synthetic());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.riskmodels.shrinkage_delta = Some(0.25);
        cfg.output.dir = Some(PathBuf::from("/tmp/x"));
        cfg.backtest.periods.truncate(2);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn window_zero_names_the_field() {
        let cfg = RunConfig::from_toml("[backtest]\nwindow_len = 0\n").unwrap();
        let errs = cfg.validate().unwrap_err();
        assert!(errs.0.iter().any(|e| e.contains("backtest.window_len")));
    }

    #[test]
    fn all_errors_listed() {
        let text = "[riskmodels]\nmodels = [\"nope\"]\n[strategies]\nweight_cap = 0.0\n[solver]\nmax_iterations = 0\n";
        let errs = RunConfig::from_toml(text).unwrap().validate().unwrap_err();
        assert_eq!(errs.0.len(), 3, "{errs}");
    }

    #[test]
    fn unknown_field_rejected_with_line() {
        let errs = RunConfig::from_toml("[backtest]\nwindow = 60\n").unwrap_err();
        assert!(errs.0[0].contains("window"), "{errs}");
        assert!(errs.0[0].contains("line 2"), "{errs}");
    }

    #[test]
    fn bad_period() {
        let text = "[[backtest.periods]]\nname = \"a\"\nstart = \"2001-01\"\nend = \"2000-01\"\n";
        let errs = RunConfig::from_toml(text).unwrap().validate().unwrap_err();
        assert!(errs.0[0].contains("backtest.periods[0]"));
        assert!(RunConfig::from_toml("[[backtest.periods]]\nname = \"a\"\nstart = \"2001-13\"\nend = \"2002-01\"\n").is_err());
    }

    #[test]
    fn half_specified_data_rejected() {
        let errs = RunConfig::from_toml("[data]\nreturns = \"r.csv\"\n").unwrap().validate().unwrap_err();
        assert!(errs.0.iter().any(|e| e.contains("data.market")));
    }
}
