//! Two-stage spatial allocation: a heterogeneous graph attention model learns
//! per-grid-cell weights from regional indicators, and Voronoi or
//! cluster-induced Voronoi partitioning turns those weights into facility
//! allocations.

pub mod allocator;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod grid;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod predictor;
pub mod synth;
pub mod trainer;

pub use error::{AutodiffError, Error, Result};
