//! Turns bundles of multi-path reasoning traces into a merged hypothesis
//! graph, analyzes that graph with Vietoris–Rips persistent homology,
//! extracts stable backbone-plus-loop reasoning skeletons, aggregates a
//! final answer by weighted voting, and statistically validates the
//! persistence→correctness link.

pub mod aggregate;
pub mod bottleneck;
pub mod canon;
pub mod config;
pub mod error;
pub mod graph;
pub mod homology;
pub mod metric;
pub mod pipeline;
pub mod providers;
pub mod relation;
pub mod skeleton;
pub mod stats;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
