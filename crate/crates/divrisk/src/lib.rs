//! File formats, configuration, parallel execution and the command-line
//! front end for `divrisk-core`.

pub mod config;
pub mod exec;
pub mod io;
pub mod output;
pub mod report;
pub mod run;

pub use divrisk_core as core;
