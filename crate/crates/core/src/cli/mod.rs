//! The `echodiff` command surface: phantom, train, translate, evaluate.

mod commands;
mod config;

pub use commands::{run, sample_seed, translate_dataset, Cli, CliError, Command, FAILURE_MARKER};
pub use config::{ConfigError, Origin, RunConfig, CONFIG_KEYS};
