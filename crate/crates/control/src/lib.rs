//! Operational shell around the warehouse engine: configuration, an HTTP
//! JSON API and a command-line client that mirrors it.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod ops;

pub use cli::{run_cli, CliOutput};
pub use config::{load_config, EngineConfig};
pub use error::ApiError;
