//! Reverse-mode gradients of the BPR loss through `L` propagation layers.
//!
//! For a layer with weights `a_e = w(x_e)`, `x_e = s_e - beta_u`, the adjoint
//! `G'` of its output splits into
//! - the residual path `(1 - tau lambda) G'`,
//! - the aggregation path `tau a_e n_e G'_dst` into each source embedding,
//! - the weight path `da_e = tau n_e <G'_dst, z_src>`, mapped through
//!   `w'` (or the softmax Jacobian) to `dx_e`, then to the similarity and to
//!   `beta_u` with a minus sign.
//!
//! Every per-node sum is a gather over that node's CSR row, so results do not
//! depend on the thread count.

use ndarray::{Array2, ArrayView2, ArrayViewMut1, Axis};
use rayon::prelude::*;

use super::sampler::Triple;
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::model::{propagate, row_norms, scoring_embeddings, Activation, ModelParams, PropagationTrace, Scoring};
use crate::objective::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embeddings: Array2<f64>,
    pub beta: Array2<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Gradients {
            embeddings: Array2::zeros(p.embeddings.raw_dim()),
            beta: Array2::zeros(p.beta.raw_dim()),
        }
    }

    /// Flattened `[embeddings..., beta...]`, for gradient checks.
    pub fn flatten(&self) -> Vec<f64> {
        self.embeddings.iter().chain(self.beta.iter()).copied().collect()
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean of `-ln sigmoid(pos - neg)`.
pub fn bpr_loss(scores_pos: &[f64], scores_neg: &[f64]) -> f64 {
    assert_eq!(scores_pos.len(), scores_neg.len(), "score vectors differ in length");
    if scores_pos.is_empty() {
        return 0.0;
    }
    let total: f64 = scores_pos
        .iter()
        .zip(scores_neg)
        .map(|(p, n)| softplus(-(p - n)))
        .sum();
    total / scores_pos.len() as f64
}

/// BPR loss over `triples` scored with `emb`, and its gradient with respect
/// to `emb`.
pub fn bpr_seed(emb: ArrayView2<f64>, n_users: usize, triples: &[Triple]) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(emb.raw_dim());
    if triples.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / triples.len() as f64;
    let mut loss = 0.0;
    for &(u, p, q) in triples {
        let (zu, zp, zq) = (emb.row(u), emb.row(n_users + p), emb.row(n_users + q));
        let diff = zu.dot(&zp) - zu.dot(&zq);
        loss += softplus(-diff);
        let c = -sigmoid(-diff) * scale;
        let delta = &zp - &zq;
        grad.row_mut(u).scaled_add(c, &delta);
        grad.row_mut(n_users + p).scaled_add(c, &zu);
        grad.row_mut(n_users + q).scaled_add(-c, &zu);
    }
    (loss * scale, grad)
}

/// Forward-only BPR loss for fixed triples; the finite-difference target.
pub fn total_bpr_loss(p: &ModelParams, g: &BipartiteGraph, triples: &[Triple]) -> Result<f64> {
    let trace = propagate(p, g)?;
    let emb = scoring_embeddings(p.hyper.scoring, &trace);
    Ok(bpr_seed(emb.view(), p.n_users, triples).0)
}

/// Propagates, scores `triples`, and returns the loss with exact gradients.
pub fn loss_and_gradients(p: &ModelParams, g: &BipartiteGraph, triples: &[Triple]) -> Result<(f64, Gradients)> {
    let trace = propagate(p, g)?;
    backward(p, &trace, triples, g)
}

/// Gradients of the BPR loss on `triples` given a trace of `p`.
pub fn backward(
    p: &ModelParams,
    trace: &PropagationTrace,
    triples: &[Triple],
    g: &BipartiteGraph,
) -> Result<(f64, Gradients)> {
    let emb = scoring_embeddings(p.hyper.scoring, trace);
    let (loss, seed) = bpr_seed(emb.view(), p.n_users, triples);
    Ok((loss, backward_from_seed(p, trace, seed, g)?))
}

/// Back-propagates an adjoint `seed` on the scoring embeddings down to the
/// parameters.
pub fn backward_from_seed(
    p: &ModelParams,
    trace: &PropagationTrace,
    seed: Array2<f64>,
    g: &BipartiteGraph,
) -> Result<Gradients> {
    let layers = p.hyper.layers;
    if trace.depth() != layers {
        return Err(Error::Argument(format!(
            "trace has {} layers, model has {layers}",
            trace.depth()
        )));
    }
    let (mut grad, tap) = match p.hyper.scoring {
        Scoring::FinalLayer => (seed, None),
        Scoring::LayerMean => {
            let tap = seed / (layers + 1) as f64;
            (tap.clone(), Some(tap))
        }
    };
    let mut beta_grad = Array2::zeros(p.beta.raw_dim());
    for l in (0..layers).rev() {
        let beta = p.layer_beta(l);
        let ctx = LayerCtx {
            z: trace.layers[l].view(),
            beta: &beta,
            sims: &trace.sims[l],
            attn_user: &trace.attn[l],
            attn_item: trace.item_attn(l),
            g,
            params: p,
        };
        let (mut grad_in, gb) = ctx.backward(grad.view());
        if let Some(tap) = &tap {
            grad_in += tap;
        }
        if let Some(bad) = grad_in.iter().chain(&gb).find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {bad} at layer {l}")));
        }
        if p.hyper.use_threshold {
            beta_grad.row_mut(l).assign(&ndarray::ArrayView1::from(&gb[..]));
        }
        grad = grad_in;
    }
    Ok(Gradients { embeddings: grad, beta: beta_grad })
}

struct LayerCtx<'a> {
    z: ArrayView2<'a, f64>,
    beta: &'a [f64],
    sims: &'a [f64],
    attn_user: &'a [f64],
    attn_item: &'a [f64],
    g: &'a BipartiteGraph,
    params: &'a ModelParams,
}

impl LayerCtx<'_> {
    /// Returns `(dL/dZ^l, dL/dbeta^l)` from `dL/dZ^{l+1}`.
    fn backward(&self, grad_out: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
        let g = self.g;
        let h = &self.params.hyper;
        let n = g.n_users();
        let tau = h.tau;
        let z = self.z;

        // Adjoints of the user-rule and item-rule weights per edge.
        let da: Vec<(f64, f64)> = (0..g.n_edges())
            .into_par_iter()
            .map(|e| {
                let (u, i) = g.edge(e);
                let c = tau * g.edge_norm(e);
                (
                    c * grad_out.row(u).dot(&z.row(n + i)),
                    c * grad_out.row(n + i).dot(&z.row(u)),
                )
            })
            .collect();

        let dx = self.logit_adjoint(&da);

        let beta_grad: Vec<f64> = (0..n)
            .map(|u| -g.user_edge_range(u).map(|e| dx[e]).sum::<f64>())
            .collect();

        let norms = h.normalize_similarity.then(|| row_norms(z));
        let residual = h.residual();
        let mut grad_in = Array2::zeros(z.raw_dim());
        grad_in
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(r, mut row)| {
                row.scaled_add(residual, &grad_out.row(r));
                if r < n {
                    let nb = g.user_neighbors(r);
                    for (k, &i) in nb.nodes.iter().enumerate() {
                        let e = nb.edge(k);
                        row.scaled_add(tau * self.attn_item[e] * nb.norms[k], &grad_out.row(n + i));
                        self.add_similarity_grad(&mut row, r, n + i, dx[e], self.sims[e], norms.as_deref());
                    }
                } else {
                    let nb = g.item_neighbors(r - n);
                    for (k, &u) in nb.nodes.iter().enumerate() {
                        let e = nb.edge(k);
                        row.scaled_add(tau * self.attn_user[e] * nb.norms[k], &grad_out.row(u));
                        self.add_similarity_grad(&mut row, r, u, dx[e], self.sims[e], norms.as_deref());
                    }
                }
            });
        (grad_in, beta_grad)
    }

    /// `dL/dx_e` from the weight adjoints.
    fn logit_adjoint(&self, da: &[(f64, f64)]) -> Vec<f64> {
        let g = self.g;
        let act = self.params.hyper.activation;
        match act {
            Activation::Softmax => {
                // Softmax Jacobian per destination group:
                // dx_e = a_e (da_e - sum_k a_k da_k).
                let mut dx: Vec<f64> = (0..g.n_users())
                    .into_par_iter()
                    .flat_map_iter(|u| {
                        let r = g.user_edge_range(u);
                        let dot: f64 = r.clone().map(|e| self.attn_user[e] * da[e].0).sum();
                        r.map(move |e| self.attn_user[e] * (da[e].0 - dot))
                    })
                    .collect();
                let item_part: Vec<Vec<(usize, f64)>> = (0..g.n_items())
                    .into_par_iter()
                    .map(|i| {
                        let nb = g.item_neighbors(i);
                        let ids: Vec<usize> = (0..nb.len()).map(|k| nb.edge(k)).collect();
                        let dot: f64 = ids.iter().map(|&e| self.attn_item[e] * da[e].1).sum();
                        ids.into_iter()
                            .map(|e| (e, self.attn_item[e] * (da[e].1 - dot)))
                            .collect()
                    })
                    .collect();
                for (e, v) in item_part.into_iter().flatten() {
                    dx[e] += v;
                }
                dx
            }
            _ => (0..g.n_edges())
                .into_par_iter()
                .map(|e| {
                    let x = self.sims[e] - self.beta[g.edge(e).0];
                    act.derivative(x) * (da[e].0 + da[e].1)
                })
                .collect(),
        }
    }

    /// Adds `ds * d s(z_row, z_other) / d z_row` to `row`.
    #[inline]
    fn add_similarity_grad(
        &self,
        row: &mut ArrayViewMut1<f64>,
        this: usize,
        other: usize,
        ds: f64,
        sim: f64,
        norms: Option<&[f64]>,
    ) {
        if ds == 0.0 {
            return;
        }
        match norms {
            None => row.scaled_add(ds, &self.z.row(other)),
            Some(norms) => {
                let (a, b) = (norms[this], norms[other]);
                if a == 0.0 || b == 0.0 {
                    return;
                }
                // d cos / d z_this = z_other / (|a||b|) - cos z_this / |a|^2
                row.scaled_add(ds / (a * b), &self.z.row(other));
                row.scaled_add(-ds * sim / (a * a), &self.z.row(this));
            }
        }
    }
}
