//! Event-level log anomaly detection over multi-scale continuous-time dynamic graphs.
//!
//! Raw log lines are mined into templates, every template becomes a node with a
//! semantic vector, and the chronological template sequence is turned into a stream
//! of timestamped edges at several hop distances. A temporal graph network keeps a
//! memory vector per template and a link predictor scores every observed edge; an
//! event is anomalous when the predicted link probability contradicts the edge that
//! was actually observed at any hop scale.
//!
//! Module map:
//!
//! - [`parser`]: tokenization, masking and fixed-depth prefix-tree template mining
//! - [`embed`]: semantic vectors and log levels per template
//! - [`graph`]: edge features and the multi-scale event stream
//! - [`nn`]: the small differentiable kernel (linear, GRU, attention, Adam)
//! - [`tgn`]: node memory, messages, memory updates and node embeddings
//! - [`detector`]: link prediction training and event-level verdicts
//! - [`harness`]: ingestion, splitting, synthetic corpora, metrics and the pipeline

pub mod detector;
pub mod embed;
pub mod error;
pub mod graph;
pub mod harness;
pub mod nn;
pub mod parser;
pub mod tgn;

pub use error::{Error, Result};
