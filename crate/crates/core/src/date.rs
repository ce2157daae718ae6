//! Calendar months.

use core::fmt;
use core::str::FromStr;

use thiserror::Error;

/// A calendar month, stored as a month count since year 0.
///
/// All data in the engine is monthly; this is the only time type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth(i32);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid year-month {0:?}, expected YYYY-MM")]
pub struct ParseYearMonthError(pub alloc::string::String);

impl YearMonth {
    /// Returns `None` if `month` is outside 1..=12.
    pub fn new(year: i32, month: u32) -> Option<Self> {
        if !(1..=12).contains(&month) {
            return None;
        }
        Some(Self(year * 12 + month as i32 - 1))
    }

    pub fn year(self) -> i32 {
        self.0.div_euclid(12)
    }

    pub fn month(self) -> u32 {
        self.0.rem_euclid(12) as u32 + 1
    }

    pub fn add_months(self, months: i32) -> Self {
        Self(self.0 + months)
    }

    /// Signed number of months from `earlier` to `self`.
    pub fn months_since(self, earlier: YearMonth) -> i32 {
        self.0 - earlier.0
    }

    pub fn succ(self) -> Self {
        self.add_months(1)
    }

    pub fn pred(self) -> Self {
        self.add_months(-1)
    }

    /// Iterates `[start, end)`.
    pub fn range(start: YearMonth, end: YearMonth) -> impl Iterator<Item = YearMonth> {
        (start.0..end.0).map(YearMonth)
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.month())
    }
}

impl FromStr for YearMonth {
    type Err = ParseYearMonthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseYearMonthError(s.into());
        let s = s.trim();
        let (y, m) = s.split_once('-').ok_or_else(err)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(err());
        }
        let year: i32 = y.parse().map_err(|_| err())?;
        let month: u32 = m.parse().map_err(|_| err())?;
        YearMonth::new(year, month).ok_or_else(err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn parse_and_display() {
        let d: YearMonth = "2020-01".parse().unwrap();
        assert_eq!(d.year(), 2020);
        assert_eq!(d.month(), 1);
        assert_eq!(d.to_string(), "2020-01");
        assert_eq!(d.pred().to_string(), "2019-12");
        assert_eq!(d.add_months(14).to_string(), "2021-03");
    }

    #[test]
    fn rejects_garbage() {
        for s in ["2020-13", "2020-00", "20-01", "2020/01", "2020-1", ""] {
            assert!(s.parse::<YearMonth>().is_err(), "{s}");
        }
    }

    #[test]
    fn range_is_half_open() {
        let a: YearMonth = "1999-11".parse().unwrap();
        let b: YearMonth = "2000-02".parse().unwrap();
        assert_eq!(YearMonth::range(a, b).count(), 3);
        assert_eq!(b.months_since(a), 3);
    }
}
