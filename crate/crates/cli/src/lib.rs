//! Command-line orchestration of the reconstruction pipeline and the local
//! HTTP service used by the investigation viewer.

pub mod commands;
pub mod config;
pub mod error;
pub mod service;

pub use config::PipelineConfig;
pub use error::CliError;
