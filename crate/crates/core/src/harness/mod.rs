//! Ingestion, splitting, synthetic corpora, metrics and the stage pipeline.

pub mod config;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod synth;

pub use config::RunConfig;
pub use metrics::{evaluate, evaluate_pairs, MetricReport};
pub use pipeline::{run_pipeline, RunDir};
pub use synth::{SynthCorpus, SynthSpec};
