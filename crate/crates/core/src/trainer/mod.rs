//! BPR training of the input embeddings and thresholds through the full
//! propagation stack.
//!
//! Each optimization step propagates over the whole training graph, scores a
//! batch of `(user, positive, negative)` triples, and back-propagates the BPR
//! loss by hand through every layer (attention weights, cosine Jacobian and
//! thresholds included). Adam with classic L2 weight decay applies the step.

mod adam;
mod backward;
mod fit;
mod grid;
mod sampler;

pub use adam::{adam_update, AdamState, TrainState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use backward::{
    backward, backward_from_seed, bpr_loss, bpr_seed, loss_and_gradients, total_bpr_loss, Gradients,
};
pub use fit::{fit, fit_with_observer, EpochRecord, FitResult};
pub use grid::{grid_search, Grid, GridCell, GridResult};
pub use sampler::{sample_bpr_triples, sample_negative, triples_for_edges, Triple};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs_max: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub negatives_per_positive: usize,
    /// Threshold-rank snapshots are taken at epoch 1, every this many epochs,
    /// and at the last epoch.
    pub snapshot_every: usize,
    /// Cutoff for the validation metrics driving early stopping.
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            weight_decay: 1e-8,
            epochs_max: 1000,
            patience: 50,
            batch_size: 2048,
            seed: 2024,
            negatives_per_positive: 1,
            snapshot_every: 10,
            eval_k: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        for (name, v) in [
            ("epochs_max", self.epochs_max),
            ("batch_size", self.batch_size),
            ("negatives_per_positive", self.negatives_per_positive),
            ("snapshot_every", self.snapshot_every),
            ("eval_k", self.eval_k),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}
