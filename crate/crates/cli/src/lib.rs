//! Experiment driver for `bapo-core`: config loading, run artifacts and the
//! subcommands behind the `bapo` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{
    cmd_compare, cmd_dump_universe, cmd_migration, cmd_train, cmd_verify_theory, output_dir,
    CompareArgs, CompareSummary, MigrationArgs, MigrationReport, TrainArgs, OUT_ENV,
};
pub use config::{load_config, parse_config, ExperimentConfig, LoadedConfig, Overrides};
pub use error::{CliError, CliResult};
pub use output::{Manifest, RunSummary};
