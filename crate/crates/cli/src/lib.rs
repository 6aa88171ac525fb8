//! Configuration and stage orchestration behind the `profproj` binary.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{Overrides, PipelineConfig};
pub use error::PipelineError;
pub use pipeline::{execute, Command, Manifest, RunReport};
