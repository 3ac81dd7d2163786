//! File formats, run configuration and the subcommands behind the `sgm`
//! binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod plot;
pub mod report;
pub mod taskpack;
