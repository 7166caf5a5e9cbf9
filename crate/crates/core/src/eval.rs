//! Exact full-catalogue top-K retrieval and Precision/Recall/NDCG@K.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::{s, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::model::{scoring_embeddings, ModelParams, PropagationTrace};

/// Which held-out set is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Targets are validation edges; train items are excluded.
    Validation,
    /// Targets are test edges; train and validation items are excluded.
    Test,
}

impl Stage {
    pub fn candidate_exclusion(self) -> &'static str {
        match self {
            Stage::Validation => "train",
            Stage::Test => "train+validation",
        }
    }
}

/// Per-user exclusion and target lists for one stage, both sorted.
#[derive(Debug, Clone)]
pub struct EvalIndex {
    pub stage: Stage,
    pub n_items: usize,
    exclude: Vec<Vec<usize>>,
    targets: Vec<Vec<usize>>,
    eligible: Vec<usize>,
}

fn by_user(n_users: usize, edges: &[(usize, usize)], lists: &mut [Vec<usize>]) {
    debug_assert_eq!(lists.len(), n_users);
    for &(u, i) in edges {
        lists[u].push(i);
    }
}

impl EvalIndex {
    pub fn new(split: &SplitDataset, stage: Stage) -> Self {
        let n = split.n_users;
        let mut train = vec![Vec::new(); n];
        by_user(n, &split.train, &mut train);
        let mut exclude = train.clone();
        let mut targets = vec![Vec::new(); n];
        match stage {
            Stage::Validation => by_user(n, &split.validation, &mut targets),
            Stage::Test => {
                by_user(n, &split.validation, &mut exclude);
                by_user(n, &split.test, &mut targets);
            }
        }
        for list in exclude.iter_mut().chain(targets.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        let eligible = (0..n)
            .filter(|&u| !train[u].is_empty() && !targets[u].is_empty())
            .collect();
        EvalIndex { stage, n_items: split.n_items, exclude, targets, eligible }
    }

    /// Users with at least one target and at least one train interaction.
    pub fn eligible_users(&self) -> &[usize] {
        &self.eligible
    }

    pub fn exclude(&self, u: usize) -> &[usize] {
        &self.exclude[u]
    }

    pub fn targets(&self, u: usize) -> &[usize] {
        &self.targets[u]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "K")]
    pub k: usize,
    pub evaluated_users: usize,
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub stage: Stage,
    /// Which known interactions were removed from the candidate set.
    pub candidate_exclusion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_user: Option<BTreeMap<usize, UserMetrics>>,
}

/// Score descending, then item id ascending.
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// The `k` highest-scoring items outside `exclude`, best first; ties go to
/// the lower item id. Returns fewer than `k` items when the candidate set is
/// smaller.
pub fn recommend_topk(scores: &[f64], exclude: &[usize], k: usize) -> Vec<usize> {
    let mut banned = vec![false; scores.len()];
    for &i in exclude {
        if i < banned.len() {
            banned[i] = true;
        }
    }
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| !banned[i]).collect();
    let k = k.min(cand.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        cand.truncate(k);
    }
    cand.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    cand
}

fn check_targets(targets: &[usize]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::Evaluation("user has no target items".into()));
    }
    Ok(())
}

/// `(hits / k, hits / |targets|)`.
pub fn precision_recall_at_k(recs: &[usize], targets: &[usize], k: usize) -> Result<(f64, f64)> {
    check_targets(targets)?;
    if k == 0 || recs.len() > k {
        return Err(Error::Evaluation(format!("{} recommendations for K={k}", recs.len())));
    }
    let hits = recs.iter().filter(|r| targets.contains(r)).count() as f64;
    Ok((hits / k as f64, hits / targets.len() as f64))
}

/// Binary-relevance NDCG with a `log2(rank + 1)` discount; the ideal DCG
/// counts `min(|targets|, k)` hits.
pub fn ndcg_at_k(recs: &[usize], targets: &[usize], k: usize) -> Result<f64> {
    check_targets(targets)?;
    if k == 0 || recs.len() > k {
        return Err(Error::Evaluation(format!("{} recommendations for K={k}", recs.len())));
    }
    let discount = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let dcg: f64 = recs
        .iter()
        .enumerate()
        .filter(|(_, r)| targets.contains(r))
        .map(|(rank, _)| discount(rank))
        .sum();
    let idcg: f64 = (0..targets.len().min(k)).map(discount).sum();
    Ok(dcg / idcg)
}

const USER_CHUNK: usize = 256;

/// Metrics for every eligible user of `index`, scoring with `emb`
/// (users first, then items).
pub fn evaluate_embeddings(
    emb: ArrayView2<f64>,
    n_users: usize,
    index: &EvalIndex,
    k: usize,
    keep_per_user: bool,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::Evaluation("K must be >= 1".into()));
    }
    if emb.nrows() != n_users + index.n_items {
        return Err(Error::Evaluation(format!(
            "embedding rows {} != {} users + {} items",
            emb.nrows(),
            n_users,
            index.n_items
        )));
    }
    let users = index.eligible_users();
    if users.is_empty() {
        return Err(Error::Evaluation(format!("no eligible users for {:?}", index.stage)));
    }
    let items = emb.slice(s![n_users.., ..]);
    let per_chunk: Vec<Result<Vec<UserMetrics>>> = users
        .par_chunks(USER_CHUNK)
        .map(|chunk| {
            let rows = emb.select(Axis(0), chunk);
            let scores = rows.dot(&items.t());
            chunk
                .iter()
                .zip(scores.axis_iter(Axis(0)))
                .map(|(&u, row)| {
                    let row = row.to_vec();
                    let recs = recommend_topk(&row, index.exclude(u), k);
                    let (precision, recall) = precision_recall_at_k(&recs, index.targets(u), k)?;
                    let ndcg = ndcg_at_k(&recs, index.targets(u), k)?;
                    Ok(UserMetrics { precision, recall, ndcg })
                })
                .collect()
        })
        .collect();

    let mut metrics = Vec::with_capacity(users.len());
    for chunk in per_chunk {
        metrics.extend(chunk?);
    }
    let count = metrics.len() as f64;
    let mean = |f: fn(&UserMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / count;
    Ok(EvalReport {
        k,
        evaluated_users: metrics.len(),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        ndcg: mean(|m| m.ndcg),
        stage: index.stage,
        candidate_exclusion: index.stage.candidate_exclusion().to_owned(),
        per_user: keep_per_user.then(|| users.iter().copied().zip(metrics.iter().copied()).collect()),
    })
}

/// Evaluates the scoring embeddings of `trace` on `stage`, with per-user
/// metrics.
pub fn evaluate_all(
    p: &ModelParams,
    trace: &PropagationTrace,
    split: &SplitDataset,
    stage: Stage,
    k: usize,
) -> Result<EvalReport> {
    let emb = scoring_embeddings(p.hyper.scoring, trace);
    evaluate_embeddings(emb.view(), p.n_users, &EvalIndex::new(split, stage), k, true)
}
