//! Model parameters and the forward pass.
//!
//! One layer is one ascent step on the smoothed Precision@K objective:
//!
//! ```text
//! z_u' = (1 - tau lambda) z_u + tau sum_{i in N_u} w(s_ui - beta_u) / sqrt(d_u d_i) z_i
//! z_i' = (1 - tau lambda) z_i + tau sum_{u in N_i} w(s_ui - beta_u) / sqrt(d_u d_i) z_u
//! ```
//!
//! with the band-pass weight `w = 4 sigmoid'`. The similarity `s_ui` inside
//! the weight is cosine by default; the aggregated vectors are always the raw
//! neighbor embeddings. Swapping the weight gives the classic reductions:
//! constant weight and zero threshold is a LightGCN layer, ReLU is NGAT4Rec,
//! softmax over each destination's neighbors is vanilla GAT.

pub mod checkpoint;

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;

/// Edge weighting function applied to `s_ui - beta_u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    /// `4 sigmoid'(x)`, peaks at the threshold.
    Bandpass,
    /// Weight 1 (LightGCN).
    Constant,
    /// `max(x, 0)` (NGAT4Rec).
    Relu,
    /// `exp(x)` normalized over each destination's neighbors (GAT).
    Softmax,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Bandpass,
        Activation::Constant,
        Activation::Relu,
        Activation::Softmax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Bandpass => "bandpass",
            Activation::Constant => "constant",
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
        }
    }

    /// Elementwise weight; softmax returns the unnormalized `exp(x)`.
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Bandpass => omega(x),
            Activation::Constant => 1.0,
            Activation::Relu => x.max(0.0),
            Activation::Softmax => x.exp(),
        }
    }

    /// Derivative of [`apply`](Self::apply). For softmax this is only the
    /// elementwise part; the normalization couples the neighbor group.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Bandpass => omega_derivative(x),
            Activation::Constant => 0.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softmax => x.exp(),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown activation {s:?} (expected bandpass, constant, relu or softmax)"
                ))
            })
    }
}

/// Which embeddings feed the final `s_ui = z_u . z_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scoring {
    FinalLayer,
    LayerMean,
}

impl Scoring {
    pub fn as_str(self) -> &'static str {
        match self {
            Scoring::FinalLayer => "final_layer",
            Scoring::LayerMean => "layer_mean",
        }
    }
}

impl fmt::Display for Scoring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final_layer" => Ok(Scoring::FinalLayer),
            "layer_mean" => Ok(Scoring::LayerMean),
            _ => Err(Error::Config(format!(
                "unknown scoring {s:?} (expected final_layer or layer_mean)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub dim: usize,
    pub layers: usize,
    pub tau: f64,
    pub lambda: f64,
    pub activation: Activation,
    /// When off, thresholds are fixed at zero and never trained.
    pub use_threshold: bool,
    /// Cosine similarity inside the weight instead of the raw dot product.
    pub normalize_similarity: bool,
    pub scoring: Scoring,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            dim: 64,
            layers: 3,
            tau: 1.0,
            lambda: 1.0,
            activation: Activation::Bandpass,
            use_threshold: true,
            normalize_similarity: true,
            scoring: Scoring::FinalLayer,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dimension must be >= 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("layer count must be >= 1".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Residual coefficient `1 - tau lambda`.
    #[inline]
    pub fn residual(&self) -> f64 {
        1.0 - self.tau * self.lambda
    }
}

/// Learnable state: input embeddings (users first, then items) and one
/// threshold per user per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub n_users: usize,
    pub n_items: usize,
    /// `(n_users + n_items) x dim`.
    pub embeddings: Array2<f64>,
    /// `layers x n_users`.
    pub beta: Array2<f64>,
    pub hyper: Hyperparams,
}

/// Standard deviation of the initial embeddings.
pub const INIT_STD: f64 = 0.1;

impl ModelParams {
    /// Gaussian embeddings with std [`INIT_STD`], zero thresholds.
    pub fn init<R: Rng + ?Sized>(n_users: usize, n_items: usize, hyper: Hyperparams, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut embeddings = Array2::zeros((n_users + n_items, hyper.dim));
        for x in embeddings.iter_mut() {
            *x = normal.sample(rng);
        }
        Ok(ModelParams {
            n_users,
            n_items,
            embeddings,
            beta: Array2::zeros((hyper.layers, n_users)),
            hyper,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let rows = self.n_users + self.n_items;
        if self.embeddings.dim() != (rows, self.hyper.dim) {
            return Err(Error::Argument(format!(
                "embeddings are {:?}, expected ({rows}, {})",
                self.embeddings.dim(),
                self.hyper.dim
            )));
        }
        if self.beta.dim() != (self.hyper.layers, self.n_users) {
            return Err(Error::Argument(format!(
                "beta is {:?}, expected ({}, {})",
                self.beta.dim(),
                self.hyper.layers,
                self.n_users
            )));
        }
        if let Some(bad) = self.embeddings.iter().chain(self.beta.iter()).find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite parameter {bad}")));
        }
        Ok(())
    }

    /// Threshold row for `layer`, or zeros when thresholds are disabled.
    pub fn layer_beta(&self, layer: usize) -> Cow<'_, [f64]> {
        if self.hyper.use_threshold {
            match self.beta.row(layer).to_slice() {
                Some(s) => Cow::Borrowed(s),
                None => Cow::Owned(self.beta.row(layer).to_vec()),
            }
        } else {
            Cow::Owned(vec![0.0; self.n_users])
        }
    }
}

/// Band-pass weight `4 sigmoid'(x) = sech^2(x / 2)`, in `(0, 1]`, exactly
/// symmetric, underflows to zero instead of overflowing.
#[inline]
pub fn omega(x: f64) -> f64 {
    let c = (0.5 * x).cosh();
    1.0 / (c * c)
}

/// `omega'(x) = omega(x) (sigmoid(-x) - sigmoid(x)) = -omega(x) tanh(x / 2)`.
#[inline]
pub fn omega_derivative(x: f64) -> f64 {
    -omega(x) * (0.5 * x).tanh()
}

/// Cosine (when `normalize`) or raw dot product. A zero vector has cosine 0.
pub fn edge_similarity(zu: ArrayView1<f64>, zi: ArrayView1<f64>, normalize: bool) -> f64 {
    let d = zu.dot(&zi);
    if !normalize {
        return d;
    }
    let norm = (zu.dot(&zu) * zi.dot(&zi)).sqrt();
    if norm == 0.0 {
        0.0
    } else {
        d / norm
    }
}

/// Result of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub embeddings: Array2<f64>,
    /// Per-edge similarity `s_ui` in the configured mode.
    pub sims: Vec<f64>,
    /// Per-edge weight used by the user update.
    pub attn: Vec<f64>,
    /// Per-edge weight used by the item update when it differs from `attn`
    /// (softmax normalizes over a different neighbor set).
    pub attn_item: Option<Vec<f64>>,
}

impl LayerOutput {
    pub fn item_attn(&self) -> &[f64] {
        self.attn_item.as_deref().unwrap_or(&self.attn)
    }
}

/// Row norms, used by the cosine similarity and its Jacobian.
pub(crate) fn row_norms(z: ArrayView2<f64>) -> Vec<f64> {
    z.axis_iter(Axis(0)).into_par_iter().map(|r| r.dot(&r).sqrt()).collect()
}

pub(crate) fn edge_sims(z: ArrayView2<f64>, g: &BipartiteGraph, norms: Option<&[f64]>) -> Vec<f64> {
    let n = g.n_users();
    (0..g.n_edges())
        .into_par_iter()
        .map(|e| {
            let (u, i) = g.edge(e);
            let d = z.row(u).dot(&z.row(n + i));
            match norms {
                None => d,
                Some(norms) => {
                    let denom = norms[u] * norms[n + i];
                    if denom == 0.0 {
                        0.0
                    } else {
                        d / denom
                    }
                }
            }
        })
        .collect()
}

/// Softmax of `x` within groups; `groups(k)` yields the user-major edge ids of
/// group `k`. Returns a per-edge array.
fn grouped_softmax<F>(x: &[f64], n_groups: usize, groups: F) -> Vec<f64>
where
    F: Fn(usize) -> Vec<usize> + Sync,
{
    let per_group: Vec<(Vec<usize>, Vec<f64>)> = (0..n_groups)
        .into_par_iter()
        .map(|k| {
            let ids = groups(k);
            let max = ids.iter().map(|&e| x[e]).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = ids.iter().map(|&e| (x[e] - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let probs = exps.into_iter().map(|v| v / sum).collect();
            (ids, probs)
        })
        .collect();
    let mut out = vec![0.0; x.len()];
    for (ids, probs) in per_group {
        for (e, p) in ids.into_iter().zip(probs) {
            out[e] = p;
        }
    }
    out
}

/// One propagation layer. `beta_l` holds one threshold per user.
pub fn forward_layer(
    z: ArrayView2<f64>,
    beta_l: &[f64],
    g: &BipartiteGraph,
    h: &Hyperparams,
) -> Result<LayerOutput> {
    let (n, m) = (g.n_users(), g.n_items());
    if z.nrows() != n + m {
        return Err(Error::Argument(format!(
            "embedding rows {} != {} users + {} items",
            z.nrows(),
            n,
            m
        )));
    }
    if beta_l.len() != n {
        return Err(Error::Argument(format!("beta has {} entries, expected {n}", beta_l.len())));
    }
    if let Some(bad) = z.iter().chain(beta_l).find(|x| !x.is_finite()) {
        return Err(Error::Propagation { layer: 0, detail: format!("input contains {bad}") });
    }

    let norms = h.normalize_similarity.then(|| row_norms(z));
    let sims = edge_sims(z, g, norms.as_deref());
    let x: Vec<f64> = (0..g.n_edges()).map(|e| sims[e] - beta_l[g.edge(e).0]).collect();

    let (attn, attn_item) = match h.activation {
        Activation::Softmax => {
            let by_user = grouped_softmax(&x, n, |u| g.user_edge_range(u).collect());
            let by_item = grouped_softmax(&x, m, |i| {
                let nb = g.item_neighbors(i);
                (0..nb.len()).map(|k| nb.edge(k)).collect()
            });
            (by_user, Some(by_item))
        }
        act => (x.par_iter().map(|&v| act.apply(v)).collect(), None),
    };

    let residual = h.residual();
    let tau = h.tau;
    let item_attn = attn_item.as_deref().unwrap_or(&attn);
    let mut out = Array2::zeros(z.raw_dim());
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(r, mut row)| {
            row.scaled_add(residual, &z.row(r));
            if r < n {
                let nb = g.user_neighbors(r);
                for (k, &i) in nb.nodes.iter().enumerate() {
                    let w = tau * attn[nb.edge(k)] * nb.norms[k];
                    row.scaled_add(w, &z.row(n + i));
                }
            } else {
                let nb = g.item_neighbors(r - n);
                for (k, &u) in nb.nodes.iter().enumerate() {
                    let w = tau * item_attn[nb.edge(k)] * nb.norms[k];
                    row.scaled_add(w, &z.row(u));
                }
            }
        });
    if let Some(bad) = out.iter().find(|x| !x.is_finite()) {
        return Err(Error::Propagation { layer: 0, detail: format!("output contains {bad}") });
    }
    Ok(LayerOutput { embeddings: out, sims, attn, attn_item })
}

/// Everything the backward pass and the analysis need from a forward run.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationTrace {
    /// `Z^(0) .. Z^(L)`.
    pub layers: Vec<Array2<f64>>,
    pub sims: Vec<Vec<f64>>,
    pub attn: Vec<Vec<f64>>,
    pub attn_item: Vec<Option<Vec<f64>>>,
}

impl PropagationTrace {
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn final_layer(&self) -> &Array2<f64> {
        self.layers.last().expect("trace has at least one snapshot")
    }

    pub fn item_attn(&self, layer: usize) -> &[f64] {
        self.attn_item[layer].as_deref().unwrap_or(&self.attn[layer])
    }
}

/// Applies [`forward_layer`] `L` times with the layer's threshold row.
pub fn propagate(p: &ModelParams, g: &BipartiteGraph) -> Result<PropagationTrace> {
    p.validate()?;
    if g.n_users() != p.n_users || g.n_items() != p.n_items {
        return Err(Error::Argument(format!(
            "graph is {}x{}, model is {}x{}",
            g.n_users(),
            g.n_items(),
            p.n_users,
            p.n_items
        )));
    }
    let layers_n = p.hyper.layers;
    let mut trace = PropagationTrace {
        layers: Vec::with_capacity(layers_n + 1),
        sims: Vec::with_capacity(layers_n),
        attn: Vec::with_capacity(layers_n),
        attn_item: Vec::with_capacity(layers_n),
    };
    trace.layers.push(p.embeddings.clone());
    for l in 0..layers_n {
        let beta = p.layer_beta(l);
        let out = forward_layer(trace.layers[l].view(), &beta, g, &p.hyper).map_err(|e| match e {
            Error::Propagation { detail, .. } => Error::Propagation { layer: l, detail },
            other => other,
        })?;
        trace.layers.push(out.embeddings);
        trace.sims.push(out.sims);
        trace.attn.push(out.attn);
        trace.attn_item.push(out.attn_item);
    }
    Ok(trace)
}

/// Embeddings used for scoring under `scoring`.
pub fn scoring_embeddings(scoring: Scoring, trace: &PropagationTrace) -> Cow<'_, Array2<f64>> {
    match scoring {
        Scoring::FinalLayer => Cow::Borrowed(trace.final_layer()),
        Scoring::LayerMean => {
            let mut mean = Array2::zeros(trace.layers[0].raw_dim());
            for layer in &trace.layers {
                mean += layer;
            }
            mean /= trace.layers.len() as f64;
            Cow::Owned(mean)
        }
    }
}

/// Raw dot-product scores of user `u` against every item.
pub fn score_all(p: &ModelParams, trace: &PropagationTrace, u: usize) -> Result<Vec<f64>> {
    if u >= p.n_users {
        return Err(Error::Index { kind: "user", index: u, len: p.n_users });
    }
    let emb = scoring_embeddings(p.hyper.scoring, trace);
    Ok(score_rows(emb.view(), p.n_users, u))
}

pub(crate) fn score_rows(emb: ArrayView2<f64>, n_users: usize, u: usize) -> Vec<f64> {
    let items = emb.slice(ndarray::s![n_users.., ..]);
    items.dot(&emb.row(u)).to_vec()
}
