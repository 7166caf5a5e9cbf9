//! # topkgat
//!
//! A top-K recommendation engine built around a graph attention layer whose
//! forward pass is one gradient-ascent step on a smoothed Precision@K
//! objective.
//!
//! The crate is organised bottom-up:
//! - [`data`]: interaction ingestion, k-core filtering, 7:1:2 splitting
//! - [`graph`]: immutable CSR bipartite graph over the training split
//! - [`objective`]: quantile thresholds, smooth Precision@K, the regularized
//!   objective and its gradients
//! - [`model`]: band-pass activation, layer propagation, scoring, checkpoints
//! - [`trainer`]: BPR sampling and loss, reverse-mode gradients, Adam,
//!   early stopping, grid search
//! - [`eval`]: exact top-K retrieval and Precision/Recall/NDCG
//! - [`analysis`]: rank of the learned thresholds among item scores

pub mod analysis;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod objective;
pub mod trainer;

pub use data::{InteractionDataset, SplitDataset};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use graph::BipartiteGraph;
pub use model::{Activation, Hyperparams, ModelParams, PropagationTrace, Scoring};
pub use trainer::TrainConfig;

/// `(user, item)` in dense id space.
pub type Edge = (usize, usize);
