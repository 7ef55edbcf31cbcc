//! File formats, configuration and pipeline stages around `gknn-core`.

pub mod artifacts;
pub mod clock;
pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{load, Resolved, RunConfig};
pub use pipeline::Stage;
