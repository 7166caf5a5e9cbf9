use log::warn;
use rand::Rng;

use crate::graph::BipartiteGraph;

/// `(user, positive item, negative item)`.
pub type Triple = (usize, usize, usize);

/// Uniform item outside `N_u`, by rejection. `None` when the user has
/// interacted with every item.
pub fn sample_negative<R: Rng + ?Sized>(g: &BipartiteGraph, u: usize, rng: &mut R) -> Option<usize> {
    let m = g.n_items();
    if g.user_degree(u) >= m {
        return None;
    }
    let seen = g.user_neighbors(u).nodes;
    loop {
        let i = rng.random_range(0..m);
        if seen.binary_search(&i).is_err() {
            return Some(i);
        }
    }
}

/// One triple per (edge, negative draw) for the given user-major edge ids.
/// Users without any possible negative are skipped with a warning.
pub fn triples_for_edges<R: Rng + ?Sized>(
    g: &BipartiteGraph,
    edges: &[usize],
    negatives_per_positive: usize,
    rng: &mut R,
) -> Vec<Triple> {
    let mut out = Vec::with_capacity(edges.len() * negatives_per_positive);
    for &e in edges {
        let (u, pos) = g.edge(e);
        for _ in 0..negatives_per_positive {
            match sample_negative(g, u, rng) {
                Some(neg) => out.push((u, pos, neg)),
                None => {
                    warn!("user {u} has interacted with every item; no negative to sample");
                    break;
                }
            }
        }
    }
    out
}

/// `batch_size` triples from uniformly drawn training edges, so users appear
/// in proportion to their degree.
pub fn sample_bpr_triples<R: Rng + ?Sized>(g: &BipartiteGraph, batch_size: usize, rng: &mut R) -> Vec<Triple> {
    if g.n_edges() == 0 {
        return Vec::new();
    }
    let edges: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..g.n_edges())).collect();
    triples_for_edges(g, &edges, 1, rng)
}
