//! Session-based recommender: alternating GRU-GNN and
//! attention layers over batched session graphs, attention readout, exact
//! nearest-neighbor candidate generation, and real-time serving.

pub mod dataio;
pub mod error;
pub mod eval;
pub mod knn;
pub mod model;
pub mod numerics;
pub mod serving;
pub mod sessiongraph;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
