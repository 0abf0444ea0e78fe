//! Library half of the `csi4cast` command-line workbench: configuration
//! parsing, scenario grids, dataset manifests, and the four commands the
//! binary dispatches to.

pub mod commands;
pub mod config;
pub mod grid;
pub mod manifest;
pub mod tables;

pub use commands::{cmd_evaluate, cmd_generate, cmd_report, cmd_train};
pub use config::RunConfig;

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "CSI4CAST_DATA_DIR";
