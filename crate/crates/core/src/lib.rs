//! Graph pointer neural networks for node classification on heterophilic
//! graphs.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`]: the graph model, dataset files, splits, adjacency
//!   normalization and homophily.
//! * [`sampler`]: breadth-first multi-hop node sequences.
//! * [`autodiff`]: a small f64 reverse-mode tape with the kernels the models
//!   need, Adam and a finite-difference checker.
//! * [`model`]: the pointer network classifier and the MLP / GCN baselines.
//! * [`harness`]: training with early stopping, the ten-split protocol, grid
//!   search and the analyses.

pub mod autodiff;
pub mod error;
pub mod graph;
pub mod harness;
pub mod model;
pub mod sampler;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, ErrorCategory, Result};
pub use graph::{Graph, NormalizedAdjacency, SplitSet};
pub use harness::{AggregateReport, RunResult};
pub use model::{Model, ModelConfig, ModelKind};
pub use sampler::{sample_sequences, NodeSequenceBatch};
