//! CSV readers and writers for return panels, market series and
//! synthetic ground truth.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use divrisk_core::data::{DataError, MarketSeries, Observation, ReturnsPanel};
use divrisk_core::synthetic::GroundTruth;
use divrisk_core::YearMonth;
use thiserror::Error;

pub const PANEL_HEADER: [&str; 4] = ["date", "asset_id", "excess_return", "market_cap"];
pub const MARKET_HEADER: [&str; 2] = ["date", "market_excess_return"];
pub const TRUTH_HEADER: [&str; 3] = ["asset_id", "beta", "idio_vol"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}: {message}")]
    Malformed { path: PathBuf, line: u64, message: String },
    #[error("{path}: expected header {expected:?}, found {found:?}")]
    Header { path: PathBuf, expected: Vec<String>, found: Vec<String> },
    #[error("{path}: {source}")]
    Data { path: PathBuf, source: DataError },
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, path: &Path, expected: &[&str]) -> Result<(), IoError> {
    let found: Vec<String> = match rdr.headers() {
        Ok(h) => h.iter().map(|s| s.trim().to_string()).collect(),
        Err(e) => return Err(csv_error(path, e)),
    };
    if found != expected {
        return Err(IoError::Header {
            path: path.to_path_buf(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found,
        });
    }
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> IoError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    IoError::Malformed { path: path.to_path_buf(), line, message: e.to_string() }
}

fn field<'r, T: std::str::FromStr>(
    rec: &'r csv::StringRecord,
    idx: usize,
    name: &str,
    path: &Path,
) -> Result<T, IoError>
where
    T::Err: std::fmt::Display,
{
    let line = rec.position().map(|p| p.line()).unwrap_or(0);
    let raw = rec.get(idx).ok_or_else(|| IoError::Malformed {
        path: path.to_path_buf(),
        line,
        message: format!("missing field {name}"),
    })?;
    raw.trim().parse().map_err(|e| IoError::Malformed {
        path: path.to_path_buf(),
        line,
        message: format!("bad {name} {raw:?}: {e}"),
    })
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(input)
}

/// Reads a `date,asset_id,excess_return,market_cap` file.
pub fn load_returns_panel(path: &Path) -> Result<ReturnsPanel, IoError> {
    read_returns_panel(open(path)?, path)
}

/// As [`load_returns_panel`]; `path` is only used in error messages.
pub fn read_returns_panel<R: Read>(input: R, path: &Path) -> Result<ReturnsPanel, IoError> {
    let mut rdr = reader(input);
    check_header(&mut rdr, path, &PANEL_HEADER)?;
    let mut observations = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let asset_id: String = field(&rec, 1, "asset_id", path)?;
        if asset_id.is_empty() {
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            return Err(IoError::Malformed { path: path.to_path_buf(), line, message: "empty asset_id".into() });
        }
        observations.push(Observation {
            date: field::<YearMonth>(&rec, 0, "date", path)?,
            asset_id,
            excess_return: field(&rec, 2, "excess_return", path)?,
            market_cap: field(&rec, 3, "market_cap", path)?,
        });
    }
    ReturnsPanel::from_observations(observations).map_err(|source| IoError::Data { path: path.to_path_buf(), source })
}

/// Reads a `date,market_excess_return` file.
pub fn load_market_series(path: &Path) -> Result<MarketSeries, IoError> {
    read_market_series(open(path)?, path)
}

pub fn read_market_series<R: Read>(input: R, path: &Path) -> Result<MarketSeries, IoError> {
    let mut rdr = reader(input);
    check_header(&mut rdr, path, &MARKET_HEADER)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        rows.push((field::<YearMonth>(&rec, 0, "date", path)?, field(&rec, 1, "market_excess_return", path)?));
    }
    MarketSeries::from_rows(rows).map_err(|source| IoError::Data { path: path.to_path_buf(), source })
}

fn create(path: &Path) -> Result<csv::Writer<File>, IoError> {
    let file = File::create(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })?;
    Ok(csv::Writer::from_writer(file))
}

fn write_err(path: &Path) -> impl Fn(csv::Error) -> IoError + '_ {
    move |e| IoError::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) }
}

pub fn write_returns_panel(panel: &ReturnsPanel, path: &Path) -> Result<(), IoError> {
    let mut w = create(path)?;
    let err = write_err(path);
    w.write_record(PANEL_HEADER).map_err(&err)?;
    for o in panel.observations() {
        w.write_record([
            o.date.to_string(),
            o.asset_id.clone(),
            o.excess_return.to_string(),
            o.market_cap.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

pub fn write_market_series(market: &MarketSeries, path: &Path) -> Result<(), IoError> {
    let mut w = create(path)?;
    let err = write_err(path);
    w.write_record(MARKET_HEADER).map_err(&err)?;
    for (d, r) in market.rows() {
        w.write_record([d.to_string(), r.to_string()]).map_err(&err)?;
    }
    w.flush().map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

pub fn write_ground_truth(truth: &GroundTruth, path: &Path) -> Result<(), IoError> {
    let mut w = create(path)?;
    let err = write_err(path);
    w.write_record(TRUTH_HEADER).map_err(&err)?;
    for a in &truth.assets {
        w.write_record([a.asset_id.clone(), a.beta.to_string(), a.idio_vol.to_string()]).map_err(&err)?;
    }
    w.flush().map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

/// Writes `text` to `path`, creating or truncating it.
pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    let mut f = File::create(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })?;
    f.write_all(text.as_bytes()).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> PathBuf {
        PathBuf::from("mem.csv")
    }

    #[test]
    fn three_row_panel() {
        let csv = "date,asset_id,excess_return,market_cap\n2020-01,AAPL,0.01,100\n2020-01,MSFT,0.02,90\n2020-02,AAPL,-0.01,101\n";
        let panel = read_returns_panel(csv.as_bytes(), &p()).unwrap();
        assert_eq!(panel.len(), 3);
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "date,asset_id,excess_return,market_cap\n2020-01,AAPL,0.01,100\n2020-02,AAPL,abc,100\n";
        match read_returns_panel(csv.as_bytes(), &p()) {
            Err(IoError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let csv = "date,asset_id,excess_return,market_cap\n2020-01,AAPL,0.01\n";
        assert!(matches!(read_returns_panel(csv.as_bytes(), &p()), Err(IoError::Malformed { line: 2, .. })));
        let csv = "date,asset_id,excess_return,market_cap\n2020-13,AAPL,0.01,1\n";
        assert!(matches!(read_returns_panel(csv.as_bytes(), &p()), Err(IoError::Malformed { line: 2, .. })));
    }

    #[test]
    fn validation_errors_surface() {
        let dup = "date,asset_id,excess_return,market_cap\n2020-01,AAPL,0.01,100\n2020-01,AAPL,0.02,100\n";
        let e = read_returns_panel(dup.as_bytes(), &p()).unwrap_err();
        assert!(matches!(e, IoError::Data { source: DataError::DuplicateKey { .. }, .. }));
        assert!(e.to_string().contains("AAPL"));
        let neg = "date,asset_id,excess_return,market_cap\n2020-01,AAPL,0.01,-5\n";
        assert!(matches!(
            read_returns_panel(neg.as_bytes(), &p()),
            Err(IoError::Data { source: DataError::NonPositiveCap { .. }, .. })
        ));
    }

    #[test]
    fn market_gaps_and_empty() {
        let ok: String = std::iter::once("date,market_excess_return\n".to_string())
            .chain((1..=12).map(|m| format!("2020-{m:02},0.01\n")))
            .collect();
        assert_eq!(read_market_series(ok.as_bytes(), &p()).unwrap().len(), 12);
        let gap = "date,market_excess_return\n2020-01,0.01\n2020-03,0.02\n";
        match read_market_series(gap.as_bytes(), &p()) {
            Err(IoError::Data { source: DataError::Gap { missing, .. }, .. }) => {
                assert_eq!(missing.to_string(), "2020-02")
            }
            other => panic!("unexpected {other:?}"),
        }
        let empty = "date,market_excess_return\n";
        assert!(matches!(
            read_market_series(empty.as_bytes(), &p()),
            Err(IoError::Data { source: DataError::Empty, .. })
        ));
    }

    #[test]
    fn wrong_header() {
        let csv = "when,who,r,cap\n";
        assert!(matches!(read_returns_panel(csv.as_bytes(), &p()), Err(IoError::Header { .. })));
    }
}
