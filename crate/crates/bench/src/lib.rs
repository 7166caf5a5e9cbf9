//! Synthetic fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topkgat::{BipartiteGraph, Hyperparams, ModelParams};

/// Random bipartite graph with roughly `avg_degree` items per user; every
/// user and item has at least one edge.
pub fn random_graph(n_users: usize, n_items: usize, avg_degree: usize, seed: u64) -> BipartiteGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::with_capacity(n_users * avg_degree + n_items);
    for u in 0..n_users {
        for _ in 0..avg_degree.max(1) {
            edges.push((u, rng.random_range(0..n_items)));
        }
    }
    for i in 0..n_items {
        edges.push((rng.random_range(0..n_users), i));
    }
    BipartiteGraph::build(n_users, n_items, &edges).expect("valid synthetic edges")
}

pub fn random_params(g: &BipartiteGraph, hyper: Hyperparams, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::init(g.n_users(), g.n_items(), hyper, &mut rng).expect("valid hyperparameters")
}
