//! Command-line runner for `brokenbind-core`: TOML run configs, the
//! `.bbdata` / `.bbckpt` binary formats, run manifests, and the
//! generate / train / eval / ablate / sweep / export commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
