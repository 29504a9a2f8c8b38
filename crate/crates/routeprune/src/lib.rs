//! Trace ingestion, synthetic trace generation, the layer-by-layer pipeline
//! and report emitters built on [`routeprune_core`].

pub mod config;
pub mod pipeline;
pub mod report;
pub mod synthetic;
pub mod trace;

pub use config::RunConfig;
pub use pipeline::{run_on_trace, run_pipeline, PipelineError};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use trace::{load_trace, save_trace, Trace};
