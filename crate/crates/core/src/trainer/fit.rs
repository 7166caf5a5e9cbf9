use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::TrainState;
use super::backward::loss_and_gradients;
use super::sampler::triples_for_edges;
use super::TrainConfig;
use crate::analysis::BetaRankSnapshot;
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_embeddings, EvalIndex, Stage};
use crate::graph::BipartiteGraph;
use crate::model::{propagate, scoring_embeddings, Hyperparams, ModelParams};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean BPR loss over the epoch's triples.
    pub loss: f64,
    pub val_ndcg20: f64,
    pub val_recall20: f64,
    /// Mean threshold rank per layer, on snapshot epochs.
    pub beta_rank_summary: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters at the best validation epoch.
    pub best: ModelParams,
    /// 0 when no epoch completed.
    pub best_epoch: usize,
    pub best_val_ndcg: f64,
    pub log: Vec<EpochRecord>,
    pub snapshots: Vec<BetaRankSnapshot>,
}

/// [`fit_with_observer`] without an observer.
pub fn fit(split: &SplitDataset, cfg: &TrainConfig, hyper: &Hyperparams) -> Result<FitResult> {
    fit_with_observer(split, cfg, hyper, |_, _, _| {})
}

fn partial(state: &TrainState, log: &[EpochRecord], snapshots: &[BetaRankSnapshot], best_epoch: usize) -> FitResult {
    FitResult {
        best: state.best_params.clone(),
        best_epoch,
        best_val_ndcg: state.best_val_ndcg,
        log: log.to_vec(),
        snapshots: snapshots.to_vec(),
    }
}

/// Trains with BPR and early stopping on validation NDCG@`eval_k`.
///
/// Each epoch shuffles the training edges, and each batch of them gets one
/// (or `negatives_per_positive`) sampled negatives, a fresh propagation, and
/// an Adam step. `observer` sees the current parameters and their threshold
/// ranks at every snapshot epoch.
pub fn fit_with_observer<F>(
    split: &SplitDataset,
    cfg: &TrainConfig,
    hyper: &Hyperparams,
    mut observer: F,
) -> Result<FitResult>
where
    F: FnMut(usize, &ModelParams, &BetaRankSnapshot),
{
    cfg.validate()?;
    hyper.validate()?;
    if split.train.is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    let g = BipartiteGraph::build(split.n_users, split.n_items, &split.train)?;
    let val_index = EvalIndex::new(split, Stage::Validation);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(split.n_users, split.n_items, *hyper, &mut rng)?;
    let mut state = TrainState::new(params);
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut snapshots: Vec<BetaRankSnapshot> = Vec::new();
    let mut best_epoch = 0;
    let mut order: Vec<usize> = (0..g.n_edges()).collect();

    for epoch in 1..=cfg.epochs_max {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let triples = triples_for_edges(&g, batch, cfg.negatives_per_positive, &mut rng);
            if triples.is_empty() {
                continue;
            }
            let step = loss_and_gradients(&state.params, &g, &triples);
            let (loss, grads) = match step {
                Ok(v) if v.0.is_finite() => v,
                Ok((loss, _)) => {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("batch loss {loss}"),
                        partial: Box::new(partial(&state, &log, &snapshots, best_epoch)),
                    })
                }
                Err(e @ (Error::Propagation { .. } | Error::Numeric(_))) => {
                    return Err(Error::Diverged {
                        epoch,
                        detail: e.to_string(),
                        partial: Box::new(partial(&state, &log, &snapshots, best_epoch)),
                    })
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss * triples.len() as f64;
            count += triples.len();
            state.adam_step(&grads, cfg.lr, cfg.weight_decay);
        }
        let epoch_loss = if count == 0 { 0.0 } else { loss_sum / count as f64 };

        let trace = match propagate(&state.params, &g) {
            Ok(t) => t,
            Err(e @ (Error::Propagation { .. } | Error::Numeric(_))) => {
                return Err(Error::Diverged {
                    epoch,
                    detail: e.to_string(),
                    partial: Box::new(partial(&state, &log, &snapshots, best_epoch)),
                })
            }
            Err(e) => return Err(e),
        };
        let emb = scoring_embeddings(hyper.scoring, &trace);
        let val = evaluate_embeddings(emb.view(), split.n_users, &val_index, cfg.eval_k, false)?;

        if val.ndcg > state.best_val_ndcg {
            state.best_val_ndcg = val.ndcg;
            state.best_params = state.params.clone();
            state.epochs_since_improvement = 0;
            best_epoch = epoch;
        } else {
            state.epochs_since_improvement += 1;
        }
        let stop = state.epochs_since_improvement >= cfg.patience || epoch == cfg.epochs_max;

        let mut summary = None;
        if epoch == 1 || epoch % cfg.snapshot_every == 0 || stop {
            let snap = BetaRankSnapshot::compute(epoch, &state.params, &trace, &g)?;
            summary = Some(snap.mean_ranks(g.user_degrees()));
            observer(epoch, &state.params, &snap);
            snapshots.push(snap);
        }
        debug!("epoch {epoch}: {} triples", count);
        info!(
            "epoch {epoch} loss {epoch_loss:.6} val ndcg@{k} {:.5} recall@{k} {:.5}",
            val.ndcg,
            val.recall,
            k = cfg.eval_k
        );
        log.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            val_ndcg20: val.ndcg,
            val_recall20: val.recall,
            beta_rank_summary: summary,
        });
        if stop {
            break;
        }
    }

    Ok(FitResult {
        best: state.best_params,
        best_epoch,
        best_val_ndcg: state.best_val_ndcg,
        log,
        snapshots,
    })
}
