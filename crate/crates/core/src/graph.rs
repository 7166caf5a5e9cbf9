//! Immutable user–item bipartite graph in CSR form, both directions.
//!
//! Edge ids are positions in the user-major adjacency, so per-edge arrays
//! (similarities, attention weights) can be indexed from either side: the
//! item-major rows carry the matching user-major edge id.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::Edge;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    User(usize),
    Item(usize),
}

/// Read-only neighbor view: sorted neighbor ids with their edge normalizers
/// and user-major edge ids.
#[derive(Debug, Clone)]
pub struct Neighbors<'a> {
    pub nodes: &'a [usize],
    pub norms: &'a [f64],
    edges: EdgeIds<'a>,
}

#[derive(Debug, Clone)]
enum EdgeIds<'a> {
    /// User rows own a contiguous block of edge ids.
    Contiguous(usize),
    Listed(&'a [usize]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    n_users: usize,
    n_items: usize,
    user_ptr: Vec<usize>,
    user_items: Vec<usize>,
    /// `1/sqrt(d_u d_i)` per user-major edge.
    edge_norm: Vec<f64>,
    edge_user: Vec<usize>,
    item_ptr: Vec<usize>,
    item_users: Vec<usize>,
    item_norm: Vec<f64>,
    item_edge: Vec<usize>,
    user_degree: Vec<usize>,
    item_degree: Vec<usize>,
}

impl BipartiteGraph {
    /// Builds the graph from training edges. Duplicates are ignored; ids must
    /// be below `n_users`/`n_items`.
    pub fn build(n_users: usize, n_items: usize, edges: &[Edge]) -> Result<Self> {
        for &(u, i) in edges {
            if u >= n_users {
                return Err(Error::Index { kind: "user", index: u, len: n_users });
            }
            if i >= n_items {
                return Err(Error::Index { kind: "item", index: i, len: n_items });
            }
        }
        let mut sorted = edges.to_vec();
        sorted.sort_unstable();
        sorted.dedup();

        let mut user_degree = vec![0; n_users];
        let mut item_degree = vec![0; n_items];
        for &(u, i) in &sorted {
            user_degree[u] += 1;
            item_degree[i] += 1;
        }
        let user_ptr = prefix_sums(&user_degree);
        let item_ptr = prefix_sums(&item_degree);

        let user_items: Vec<usize> = sorted.iter().map(|&(_, i)| i).collect();
        let edge_user: Vec<usize> = sorted.iter().map(|&(u, _)| u).collect();
        let edge_norm: Vec<f64> = sorted
            .iter()
            .map(|&(u, i)| 1.0 / ((user_degree[u] * item_degree[i]) as f64).sqrt())
            .collect();

        // Counting sort by item; users arrive ascending because `sorted` is
        // user-major.
        let mut cursor = item_ptr.clone();
        let mut item_users = vec![0; sorted.len()];
        let mut item_edge = vec![0; sorted.len()];
        let mut item_norm = vec![0.0; sorted.len()];
        for (e, &(u, i)) in sorted.iter().enumerate() {
            let slot = cursor[i];
            cursor[i] += 1;
            item_users[slot] = u;
            item_edge[slot] = e;
            item_norm[slot] = edge_norm[e];
        }

        Ok(BipartiteGraph {
            n_users,
            n_items,
            user_ptr,
            user_items,
            edge_norm,
            edge_user,
            item_ptr,
            item_users,
            item_norm,
            item_edge,
            user_degree,
            item_degree,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_edges(&self) -> usize {
        self.user_items.len()
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.user_degree[u]
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.item_degree[i]
    }

    pub fn user_degrees(&self) -> &[usize] {
        &self.user_degree
    }

    pub fn item_degrees(&self) -> &[usize] {
        &self.item_degree
    }

    /// `(user, item)` of a user-major edge id.
    pub fn edge(&self, e: usize) -> Edge {
        (self.edge_user[e], self.user_items[e])
    }

    pub fn edge_norm(&self, e: usize) -> f64 {
        self.edge_norm[e]
    }

    pub fn edge_norms(&self) -> &[f64] {
        &self.edge_norm
    }

    /// Range of user-major edge ids owned by `u`.
    pub fn user_edge_range(&self, u: usize) -> std::ops::Range<usize> {
        self.user_ptr[u]..self.user_ptr[u + 1]
    }

    pub fn neighbors(&self, node: Node) -> Result<Neighbors<'_>> {
        match node {
            Node::User(u) => {
                if u >= self.n_users {
                    return Err(Error::Index { kind: "user", index: u, len: self.n_users });
                }
                Ok(self.user_neighbors(u))
            }
            Node::Item(i) => {
                if i >= self.n_items {
                    return Err(Error::Index { kind: "item", index: i, len: self.n_items });
                }
                Ok(self.item_neighbors(i))
            }
        }
    }

    /// Unchecked variant of [`neighbors`](Self::neighbors) for hot loops.
    #[inline]
    pub fn user_neighbors(&self, u: usize) -> Neighbors<'_> {
        let r = self.user_edge_range(u);
        Neighbors {
            nodes: &self.user_items[r.clone()],
            norms: &self.edge_norm[r.clone()],
            edges: EdgeIds::Contiguous(r.start),
        }
    }

    #[inline]
    pub fn item_neighbors(&self, i: usize) -> Neighbors<'_> {
        let r = self.item_ptr[i]..self.item_ptr[i + 1];
        Neighbors {
            nodes: &self.item_users[r.clone()],
            norms: &self.item_norm[r.clone()],
            edges: EdgeIds::Listed(&self.item_edge[r]),
        }
    }

    /// Whether `(u, i)` is a training edge.
    pub fn contains(&self, u: usize, i: usize) -> bool {
        u < self.n_users && self.user_neighbors(u).nodes.binary_search(&i).is_ok()
    }

    /// CSV histogram `side,degree,count` for debugging.
    pub fn degree_histogram_csv(&self) -> String {
        let mut out = String::from("side,degree,count\n");
        for (side, degrees) in [("user", &self.user_degree), ("item", &self.item_degree)] {
            let max = degrees.iter().copied().max().unwrap_or(0);
            let mut counts = vec![0usize; max + 1];
            for &d in degrees.iter() {
                counts[d] += 1;
            }
            for (d, c) in counts.iter().enumerate().filter(|(_, &c)| c > 0) {
                let _ = writeln!(out, "{side},{d},{c}");
            }
        }
        out
    }
}

impl Neighbors<'_> {
    /// User-major edge id of the `k`-th neighbor.
    #[inline]
    pub fn edge(&self, k: usize) -> usize {
        match self.edges {
            EdgeIds::Contiguous(start) => start + k,
            EdgeIds::Listed(ids) => ids[k],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn prefix_sums(counts: &[usize]) -> Vec<usize> {
    let mut ptr = Vec::with_capacity(counts.len() + 1);
    ptr.push(0);
    let mut acc = 0;
    for &c in counts {
        acc += c;
        ptr.push(acc);
    }
    ptr
}
