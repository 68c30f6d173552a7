//! Two-stage retrieval with reasoning-trace reranking, reranker-filtered hard
//! negative mining and a weighted InfoNCE objective.

pub mod error;
pub mod eval;
pub mod gateway;
pub mod index;
pub mod io;
pub mod loss;
pub mod mining;
pub mod model;
pub mod pipeline;
pub mod seed;

pub use error::{BackendError, Error, Result};
pub use index::Index;
pub use model::*;
pub use pipeline::{CascadeResult, CorpusStores};
