use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::fit::{fit, FitResult};
use super::TrainConfig;
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::model::Hyperparams;

/// Search space over learning rate, weight decay and depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub layers: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            lrs: vec![0.1, 0.01, 0.001],
            weight_decays: vec![0.0, 1e-8, 1e-4],
            layers: vec![1, 2, 3, 4, 5],
        }
    }
}

impl Grid {
    /// The single cell given by `cfg` and `hyper`.
    pub fn singleton(cfg: &TrainConfig, hyper: &Hyperparams) -> Self {
        Grid { lrs: vec![cfg.lr], weight_decays: vec![cfg.weight_decay], layers: vec![hyper.layers] }
    }

    /// `(lr, weight_decay, layers)` in lr-major order.
    pub fn cells(&self) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::with_capacity(self.lrs.len() * self.weight_decays.len() * self.layers.len());
        for &lr in &self.lrs {
            for &wd in &self.weight_decays {
                for &l in &self.layers {
                    out.push((lr, wd, l));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lr: f64,
    pub weight_decay: f64,
    pub layers: usize,
    pub val_ndcg20: f64,
    pub val_recall20: f64,
    pub best_epoch: usize,
    /// False when training diverged; metrics then come from the last good
    /// checkpoint.
    pub completed: bool,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    /// Sorted by validation NDCG, best first; ties keep grid order.
    pub leaderboard: Vec<GridCell>,
    pub best_config: TrainConfig,
    pub best_hyper: Hyperparams,
    pub best_fit: FitResult,
}

/// Trains every cell of `grid` from `cfg`/`hyper` and ranks them by
/// validation NDCG. A cell that diverges is kept with its last good
/// checkpoint; any other error aborts the search.
pub fn grid_search(split: &SplitDataset, grid: &Grid, cfg: &TrainConfig, hyper: &Hyperparams) -> Result<GridResult> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("grid has no cells".into()));
    }
    let mut board = Vec::with_capacity(cells.len());
    let mut best: Option<(f64, TrainConfig, Hyperparams, FitResult)> = None;
    for (k, &(lr, weight_decay, layers)) in cells.iter().enumerate() {
        let c = TrainConfig { lr, weight_decay, ..cfg.clone() };
        let h = Hyperparams { layers, ..*hyper };
        info!("grid cell {}/{}: lr={lr} wd={weight_decay} L={layers}", k + 1, cells.len());
        let (result, completed) = match fit(split, &c, &h) {
            Ok(r) => (r, true),
            Err(Error::Diverged { epoch, detail, partial }) => {
                warn!("cell lr={lr} wd={weight_decay} L={layers} diverged at epoch {epoch}: {detail}");
                (*partial, false)
            }
            Err(e) => return Err(e),
        };
        let val_recall20 = result
            .log
            .iter()
            .find(|r| r.epoch == result.best_epoch)
            .map_or(0.0, |r| r.val_recall20);
        let score = if result.best_epoch == 0 { f64::NEG_INFINITY } else { result.best_val_ndcg };
        board.push(GridCell {
            lr,
            weight_decay,
            layers,
            val_ndcg20: score.max(0.0),
            val_recall20,
            best_epoch: result.best_epoch,
            completed,
        });
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, c, h, result));
        }
    }
    board.sort_by(|a, b| b.val_ndcg20.total_cmp(&a.val_ndcg20));
    let (_, best_config, best_hyper, best_fit) = best.expect("grid has at least one cell");
    Ok(GridResult { leaderboard: board, best_config, best_hyper, best_fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{planted_blocks, split};

    #[test]
    fn default_grid_has_45_cells() {
        let cells = Grid::default().cells();
        assert_eq!(cells.len(), 45);
        assert_eq!(cells[0], (0.1, 0.0, 1));
        assert_eq!(cells[44], (0.001, 1e-4, 5));
    }

    #[test]
    fn singleton_grid_equals_fit() {
        let s = split(&planted_blocks(20, 30, 2, 0.4, 5), [7, 1, 2], 1).unwrap();
        let cfg = TrainConfig { epochs_max: 3, batch_size: 64, ..TrainConfig::default() };
        let h = Hyperparams { dim: 4, layers: 1, ..Hyperparams::default() };
        let g = grid_search(&s, &Grid::singleton(&cfg, &h), &cfg, &h).unwrap();
        let direct = fit(&s, &cfg, &h).unwrap();
        assert_eq!(g.leaderboard.len(), 1);
        assert_eq!(g.best_fit.best, direct.best);
        assert_eq!(g.best_fit.log, direct.log);
        assert_eq!(g.leaderboard[0].val_ndcg20, direct.best_val_ndcg);
    }

    #[test]
    fn leaderboard_is_sorted() {
        let s = split(&planted_blocks(20, 30, 2, 0.4, 5), [7, 1, 2], 1).unwrap();
        let cfg = TrainConfig { epochs_max: 2, batch_size: 64, ..TrainConfig::default() };
        let h = Hyperparams { dim: 4, ..Hyperparams::default() };
        let grid = Grid { lrs: vec![0.1, 0.001], weight_decays: vec![0.0], layers: vec![1, 2] };
        let r = grid_search(&s, &grid, &cfg, &h).unwrap();
        assert_eq!(r.leaderboard.len(), 4);
        assert!(r.leaderboard.windows(2).all(|w| w[0].val_ndcg20 >= w[1].val_ndcg20));
        assert_eq!(r.best_fit.best_val_ndcg, r.leaderboard[0].val_ndcg20);
        let empty = Grid { lrs: vec![], ..Grid::default() };
        assert!(grid_search(&s, &empty, &cfg, &h).is_err());
    }
}
