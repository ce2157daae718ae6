//! Portfolio construction under diversification-oriented risk models.
//!
//! The crate is `no_std` (with `alloc`). File formats, the command line and
//! parallel execution live in the `divrisk` crate.

#![no_std]

extern crate alloc;

pub mod date;
pub mod linalg;
pub mod data;
pub mod synthetic;
pub mod riskmodels;
pub mod qpsolve;
pub mod strategies;
pub mod backtest;
pub mod metrics;

pub use date::YearMonth;
