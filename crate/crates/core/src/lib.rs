//! GL-GNN: semi-supervised node classification that learns its own graphs.
//!
//! Each of M sub-modules selects features with a learnable vector, builds a
//! sample relation graph from label-augmented similarities reweighted by
//! multi-hop connection probabilities, sparsifies it per row, and runs two
//! generalized GCN layers. A learned network over the sub-modules (plus one
//! aggregation node) fuses predictions and graphs. Everything trains jointly
//! by reverse-mode automatic differentiation on dense f64 tensors.

pub mod blas;
pub mod data;
pub mod error;
pub mod fastmath;
pub mod graph;
pub mod model;
pub mod network;
pub mod optim;
pub mod runner;
pub mod runtime;
pub mod tape;
pub mod tensor;

pub use data::{Dataset, SyntheticSpec};
pub use error::{Error, Result};
pub use graph::{EdgeList, HopSupports, KnnMetric, NoiseRecord};
pub use optim::{AdamConfig, OptimizerState};
pub use runner::{RunConfig, RunReport};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
