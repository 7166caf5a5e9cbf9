//! Differentiable top-K objective.
//!
//! The hard Precision@K of a user is rewritten with a per-user quantile
//! threshold `beta_u` (the K-th largest score) and the indicator
//! `[s_ui >= beta_u]` is relaxed to `sigmoid(s_ui - beta_u)`. Summing over
//! training edges with the symmetric degree normalizer and subtracting an L2
//! penalty gives
//!
//! ```text
//! J(Z, beta) = sum_{(u,i) in D} sigmoid(z_u . z_i - beta_u) / sqrt(d_u d_i) - lambda ||Z||^2
//! ```
//!
//! Everything here uses raw dot products and runs in `f64`.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothMetricConfig {
    pub k: usize,
    pub lambda: f64,
    /// Use the exact K-th largest score instead of a supplied threshold.
    pub use_exact_quantile: bool,
}

impl SmoothMetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid'(x) = sigmoid(x) sigmoid(-x)`, never overflows.
#[inline]
pub fn sigmoid_derivative(x: f64) -> f64 {
    sigmoid(x) * sigmoid(-x)
}

/// K-th largest value of `scores`: the infimum of the top-K score set.
pub fn topk_threshold(scores: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > scores.len() {
        return Err(Error::Argument(format!(
            "K = {k} outside 1..={}",
            scores.len()
        )));
    }
    let mut buf = scores.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    Ok(*kth)
}

/// `(1/K) sum_{i in relevant} sigmoid(s_ui - beta_u)`.
pub fn smooth_precision_at_k(scores: &[f64], relevant: &[usize], beta: f64, k: usize) -> f64 {
    relevant.iter().map(|&i| sigmoid(scores[i] - beta)).sum::<f64>() / k as f64
}

/// Per-user thresholds: the exact K-th largest raw score when
/// `cfg.use_exact_quantile`, otherwise a copy of `supplied`.
pub fn resolve_thresholds(
    z: ArrayView2<f64>,
    n_users: usize,
    supplied: &[f64],
    cfg: &SmoothMetricConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !cfg.use_exact_quantile {
        return Ok(supplied.to_vec());
    }
    let items = z.slice(ndarray::s![n_users.., ..]);
    (0..n_users)
        .map(|u| {
            let scores = items.dot(&z.row(u)).to_vec();
            topk_threshold(&scores, cfg.k)
        })
        .collect()
}

fn check_shapes(z: ArrayView2<f64>, beta: &[f64], g: &BipartiteGraph) -> Result<()> {
    if z.nrows() != g.n_users() + g.n_items() {
        return Err(Error::Argument(format!(
            "embedding rows {} != n_users + n_items = {}",
            z.nrows(),
            g.n_users() + g.n_items()
        )));
    }
    if beta.len() != g.n_users() {
        return Err(Error::Argument(format!(
            "beta length {} != n_users {}",
            beta.len(),
            g.n_users()
        )));
    }
    Ok(())
}

#[inline]
fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

/// Regularized smooth Precision@K objective `J` over the training edges.
pub fn objective_j(z: ArrayView2<f64>, beta: &[f64], g: &BipartiteGraph, lambda: f64) -> Result<f64> {
    check_shapes(z, beta, g)?;
    let n = g.n_users();
    let mut total = 0.0;
    for e in 0..g.n_edges() {
        let (u, i) = g.edge(e);
        let s = dot(z.row(u), z.row(n + i));
        total += sigmoid(s - beta[u]) * g.edge_norm(e);
    }
    let value = total - lambda * z.iter().map(|x| x * x).sum::<f64>();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective is {value}")));
    }
    Ok(value)
}

/// The edge term of the gradient in sigmoid-derivative form: for users
/// `sum_{i in N_u} sigmoid'(s_ui - beta_u) / sqrt(d_u d_i) z_i`, items
/// symmetric with the owning user's threshold.
pub fn topk_gradient_term(z: ArrayView2<f64>, beta: &[f64], g: &BipartiteGraph) -> Result<Array2<f64>> {
    check_shapes(z, beta, g)?;
    let n = g.n_users();
    let mut grad = Array2::zeros(z.raw_dim());
    for e in 0..g.n_edges() {
        let (u, i) = g.edge(e);
        let w = sigmoid_derivative(dot(z.row(u), z.row(n + i)) - beta[u]) * g.edge_norm(e);
        grad.row_mut(u).scaled_add(w, &z.row(n + i));
        grad.row_mut(n + i).scaled_add(w, &z.row(u));
    }
    Ok(grad)
}

/// `dJ/dZ`: the edge term minus `2 lambda Z`, the exact derivative of the
/// `lambda ||Z||^2` penalty.
pub fn analytic_grad(z: ArrayView2<f64>, beta: &[f64], g: &BipartiteGraph, lambda: f64) -> Result<Array2<f64>> {
    let mut grad = topk_gradient_term(z, beta, g)?;
    grad.scaled_add(-2.0 * lambda, &z);
    Ok(grad)
}

/// `dJ/dbeta_u = -sum_{i in N_u} sigmoid'(s_ui - beta_u) / sqrt(d_u d_i)`.
pub fn beta_gradient(z: ArrayView2<f64>, beta: &[f64], g: &BipartiteGraph) -> Result<Vec<f64>> {
    check_shapes(z, beta, g)?;
    let n = g.n_users();
    let mut grad = vec![0.0; n];
    for e in 0..g.n_edges() {
        let (u, i) = g.edge(e);
        grad[u] -= sigmoid_derivative(dot(z.row(u), z.row(n + i)) - beta[u]) * g.edge_norm(e);
    }
    Ok(grad)
}

/// Central differences of [`objective_j`] in every coordinate of `Z`.
pub fn finite_diff_grad(
    z: ArrayView2<f64>,
    beta: &[f64],
    g: &BipartiteGraph,
    lambda: f64,
    h: f64,
) -> Result<Array2<f64>> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Argument(format!("step must be positive, got {h}")));
    }
    let mut work = z.to_owned();
    let mut grad = Array2::zeros(z.raw_dim());
    for r in 0..z.nrows() {
        for c in 0..z.ncols() {
            let orig = work[[r, c]];
            work[[r, c]] = orig + h;
            let plus = objective_j(work.view(), beta, g, lambda)?;
            work[[r, c]] = orig - h;
            let minus = objective_j(work.view(), beta, g, lambda)?;
            work[[r, c]] = orig;
            grad[[r, c]] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// `max |a - b| / max |b|`, the normwise relative error used by the
/// gradient checks.
pub fn relative_error(actual: &[f64], reference: &[f64]) -> f64 {
    let diff = actual
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = reference.iter().map(|b| b.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
