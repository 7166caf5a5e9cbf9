//! Where each learned threshold sits in its user's score distribution.
//!
//! The rank of `beta_u^(l)` is the number of items whose layer-`l` similarity
//! is at least `beta_u^(l)`: the `K` that the layer effectively targets for
//! that user. Similarities use the layer input `Z^(l)` and the same mode
//! (cosine or dot) as the forward pass.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::model::{ModelParams, PropagationTrace};

pub const DEGREE_CSV: &str = "beta_rank_by_degree.csv";
pub const TRAJECTORY_CSV: &str = "beta_rank_trajectory.csv";

/// Layer-`l` similarity inputs, rows normalized in cosine mode.
fn similarity_basis(trace: &PropagationTrace, l: usize, normalize: bool) -> Array2<f64> {
    let mut z = trace.layers[l].clone();
    if normalize {
        z.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut row| {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        });
    }
    z
}

fn check_layer(p: &ModelParams, trace: &PropagationTrace, l: usize) -> Result<()> {
    if l >= p.hyper.layers || l >= trace.depth() {
        return Err(Error::Index { kind: "layer", index: l, len: p.hyper.layers.min(trace.depth()) });
    }
    Ok(())
}

/// Similarities of user `u` with every item at layer `l`.
pub fn layer_scores(p: &ModelParams, trace: &PropagationTrace, u: usize, l: usize) -> Result<Vec<f64>> {
    check_layer(p, trace, l)?;
    if u >= p.n_users {
        return Err(Error::Index { kind: "user", index: u, len: p.n_users });
    }
    let z = similarity_basis(trace, l, p.hyper.normalize_similarity);
    Ok(z.slice(s![p.n_users.., ..]).dot(&z.row(u)).to_vec())
}

/// Number of scores `>= beta`.
pub fn rank_of(scores: &[f64], beta: f64) -> usize {
    scores.iter().filter(|&&s| s >= beta).count()
}

/// `|{i : s_ui^(l) >= beta_u^(l)}|` over all items.
pub fn beta_rank(p: &ModelParams, trace: &PropagationTrace, u: usize, l: usize) -> Result<usize> {
    let scores = layer_scores(p, trace, u, l)?;
    Ok(rank_of(&scores, p.layer_beta(l)[u]))
}

const USER_CHUNK: usize = 256;

/// Ranks for every user at layer `l`.
fn layer_ranks(z: ArrayView2<f64>, n_users: usize, beta: &[f64]) -> Vec<usize> {
    let items = z.slice(s![n_users.., ..]);
    let users: Vec<usize> = (0..n_users).collect();
    users
        .par_chunks(USER_CHUNK)
        .flat_map_iter(|chunk| {
            let scores = z.select(Axis(0), chunk).dot(&items.t());
            chunk
                .iter()
                .zip(scores.axis_iter(Axis(0)))
                .map(|(&u, row)| row.iter().filter(|&&s| s >= beta[u]).count())
                .collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeBucketRow {
    /// 1-based layer index.
    pub layer: usize,
    pub bucket_lo: usize,
    /// Exclusive.
    pub bucket_hi: usize,
    pub mean_rank: f64,
    pub n_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub layer: usize,
    pub mean_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaRankSnapshot {
    pub epoch: usize,
    /// `ranks[l][u]`.
    pub ranks: Vec<Vec<usize>>,
    pub degree_buckets: Vec<DegreeBucketRow>,
}

impl BetaRankSnapshot {
    pub fn compute(epoch: usize, p: &ModelParams, trace: &PropagationTrace, g: &BipartiteGraph) -> Result<Self> {
        if trace.depth() != p.hyper.layers {
            return Err(Error::Argument(format!(
                "trace has {} layers, model has {}",
                trace.depth(),
                p.hyper.layers
            )));
        }
        let ranks = (0..p.hyper.layers)
            .map(|l| {
                let z = similarity_basis(trace, l, p.hyper.normalize_similarity);
                layer_ranks(z.view(), p.n_users, &p.layer_beta(l))
            })
            .collect();
        let mut snap = BetaRankSnapshot { epoch, ranks, degree_buckets: Vec::new() };
        snap.degree_buckets = degree_bucket_report(&snap, g.user_degrees());
        Ok(snap)
    }

    /// Mean rank per layer over users with at least one train interaction.
    pub fn mean_ranks(&self, degrees: &[usize]) -> Vec<f64> {
        self.ranks
            .iter()
            .map(|ranks| {
                let (sum, count) = ranks
                    .iter()
                    .zip(degrees)
                    .filter(|(_, &d)| d > 0)
                    .fold((0.0, 0usize), |(s, c), (&r, _)| (s + r as f64, c + 1));
                if count == 0 {
                    0.0
                } else {
                    sum / count as f64
                }
            })
            .collect()
    }
}

/// Logarithmic buckets covering `[min, max]` of the positive degrees: the
/// first runs from the minimum to the next power of two, then each doubles.
pub fn degree_buckets(degrees: &[usize]) -> Vec<(usize, usize)> {
    let positive = degrees.iter().copied().filter(|&d| d > 0);
    let (Some(lo), Some(hi)) = (positive.clone().min(), positive.max()) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut start = lo;
    while start <= hi {
        let end = (start + 1).next_power_of_two();
        out.push((start, end));
        start = end;
    }
    out
}

/// Mean rank per (layer, degree bucket); empty buckets are omitted.
pub fn degree_bucket_report(snapshot: &BetaRankSnapshot, degrees: &[usize]) -> Vec<DegreeBucketRow> {
    let buckets = degree_buckets(degrees);
    let mut rows = Vec::new();
    for (l, ranks) in snapshot.ranks.iter().enumerate() {
        for &(lo, hi) in &buckets {
            let members: Vec<usize> = (0..ranks.len()).filter(|&u| (lo..hi).contains(&degrees[u])).collect();
            if members.is_empty() {
                continue;
            }
            let mean = members.iter().map(|&u| ranks[u] as f64).sum::<f64>() / members.len() as f64;
            rows.push(DegreeBucketRow { layer: l + 1, bucket_lo: lo, bucket_hi: hi, mean_rank: mean, n_users: members.len() });
        }
    }
    rows
}

/// Mean rank per (epoch, layer) across snapshots, in snapshot order.
pub fn training_trajectory_report(snapshots: &[BetaRankSnapshot], degrees: &[usize]) -> Result<Vec<TrajectoryRow>> {
    if snapshots.len() < 2 {
        return Err(Error::Argument(format!(
            "a trajectory needs at least 2 snapshots, got {}",
            snapshots.len()
        )));
    }
    Ok(snapshots
        .iter()
        .flat_map(|snap| {
            snap.mean_ranks(degrees)
                .into_iter()
                .enumerate()
                .map(|(l, mean_rank)| TrajectoryRow { epoch: snap.epoch, layer: l + 1, mean_rank })
        })
        .collect())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_degree_csv(path: &Path, rows: &[DegreeBucketRow]) -> Result<()> {
    write_rows(path, rows, &["layer", "bucket_lo", "bucket_hi", "mean_rank", "n_users"])
}

pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    write_rows(path, rows, &["epoch", "layer", "mean_rank"])
}
