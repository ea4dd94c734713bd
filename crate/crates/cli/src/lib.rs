//! Library side of the `posediff` binary: configuration, the subcommands,
//! error mapping to exit codes and SVG plotting.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
