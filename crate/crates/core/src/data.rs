//! Interaction ingestion, k-core filtering and the global 7:1:2 split.
//!
//! Datasets are implicit-feedback: an interaction is a `(user, item)` pair,
//! duplicates collapse, and any extra columns in the raw file are ignored.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Edge;

pub const TRAIN_FILE: &str = "train.tsv";
pub const VALID_FILE: &str = "valid.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Bijection between opaque tokens and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    /// Returns the dense id for `token`, assigning the next one if unseen.
    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Keeps only ids for which `keep` is true, re-densified in ascending
    /// old-id order. Returns the map and the old→new translation.
    fn retain(&self, keep: &[bool]) -> (IdMap, Vec<Option<usize>>) {
        let mut out = IdMap::default();
        let mut remap = vec![None; self.tokens.len()];
        for (old, token) in self.tokens.iter().enumerate() {
            if keep[old] {
                remap[old] = Some(out.intern(token));
            }
        }
        (out, remap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    /// One interaction per line: user token, item token, extra columns ignored.
    Tsv,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionDataset {
    pub n_users: usize,
    pub n_items: usize,
    /// Deduplicated interactions in first-appearance order.
    pub interactions: Vec<Edge>,
    pub user_ids: IdMap,
    pub item_ids: IdMap,
}

impl InteractionDataset {
    /// Builds a dataset from token pairs, dropping duplicates.
    pub fn from_pairs<'a, I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut ds = InteractionDataset::default();
        let mut seen = HashSet::new();
        for (u, i) in pairs {
            ds.push_tokens(u, i, &mut seen);
        }
        ds
    }

    fn push_tokens(&mut self, user: &str, item: &str, seen: &mut HashSet<Edge>) {
        let u = self.user_ids.intern(user);
        let i = self.item_ids.intern(item);
        if seen.insert((u, i)) {
            self.interactions.push((u, i));
        }
        self.n_users = self.user_ids.len();
        self.n_items = self.item_ids.len();
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_users];
        for &(u, _) in &self.interactions {
            deg[u] += 1;
        }
        deg
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_items];
        for &(_, i) in &self.interactions {
            deg[i] += 1;
        }
        deg
    }
}

/// Reads a whitespace-separated interaction log.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<InteractionDataset> {
    let InputFormat::Tsv = format;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ds = InteractionDataset::default();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split_whitespace();
        match (cols.next(), cols.next()) {
            (Some(u), Some(i)) => ds.push_tokens(u, i, &mut seen),
            _ => {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: idx + 1,
                    message: format!("expected at least 2 columns, got {line:?}"),
                })
            }
        }
    }
    Ok(ds)
}

/// Maximal k-core: repeatedly drops users and items with degree below `k`.
///
/// Surviving ids are re-densified in their previous relative order.
pub fn kcore_filter(ds: &InteractionDataset, k: usize) -> InteractionDataset {
    let k = k.max(1);
    let (n, m) = (ds.n_users, ds.n_items);
    let mut user_edges = vec![Vec::new(); n];
    let mut item_edges = vec![Vec::new(); m];
    for (e, &(u, i)) in ds.interactions.iter().enumerate() {
        user_edges[u].push(e);
        item_edges[i].push(e);
    }
    let mut udeg: Vec<usize> = user_edges.iter().map(Vec::len).collect();
    let mut ideg: Vec<usize> = item_edges.iter().map(Vec::len).collect();
    let mut alive = vec![true; ds.interactions.len()];
    let mut user_gone = vec![false; n];
    let mut item_gone = vec![false; m];

    #[derive(Clone, Copy)]
    enum Node {
        User(usize),
        Item(usize),
    }
    let mut queue = VecDeque::new();
    for u in 0..n {
        if udeg[u] < k {
            user_gone[u] = true;
            queue.push_back(Node::User(u));
        }
    }
    for i in 0..m {
        if ideg[i] < k {
            item_gone[i] = true;
            queue.push_back(Node::Item(i));
        }
    }
    while let Some(node) = queue.pop_front() {
        let edges = match node {
            Node::User(u) => &user_edges[u],
            Node::Item(i) => &item_edges[i],
        };
        for &e in edges {
            if !alive[e] {
                continue;
            }
            alive[e] = false;
            let (u, i) = ds.interactions[e];
            udeg[u] -= 1;
            ideg[i] -= 1;
            match node {
                Node::User(_) if !item_gone[i] && ideg[i] < k => {
                    item_gone[i] = true;
                    queue.push_back(Node::Item(i));
                }
                Node::Item(_) if !user_gone[u] && udeg[u] < k => {
                    user_gone[u] = true;
                    queue.push_back(Node::User(u));
                }
                _ => {}
            }
        }
    }

    let keep_users: Vec<bool> = user_gone.iter().map(|g| !g).collect();
    let keep_items: Vec<bool> = item_gone.iter().map(|g| !g).collect();
    let (user_ids, user_remap) = ds.user_ids.retain(&keep_users);
    let (item_ids, item_remap) = ds.item_ids.retain(&keep_items);
    let interactions = ds
        .interactions
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(&(u, i), _)| (user_remap[u].unwrap(), item_remap[i].unwrap()))
        .collect();
    InteractionDataset {
        n_users: user_ids.len(),
        n_items: item_ids.len(),
        interactions,
        user_ids,
        item_ids,
    }
}

/// Train/validation/test partition sharing one dense id space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub n_users: usize,
    pub n_items: usize,
    pub train: Vec<Edge>,
    pub validation: Vec<Edge>,
    pub test: Vec<Edge>,
    pub split_seed: u64,
    pub kcore: usize,
}

/// Cut sizes for `total` under integer `ratios`: floor for the first two
/// parts, remainder to the last.
pub fn split_sizes(total: usize, ratios: [u32; 3]) -> Result<[usize; 3]> {
    if ratios.contains(&0) {
        return Err(Error::Config(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    let sum: u64 = ratios.iter().map(|&r| r as u64).sum();
    let part = |r: u32| ((total as u64 * r as u64) / sum) as usize;
    let train = part(ratios[0]);
    let valid = part(ratios[1]);
    Ok([train, valid, total - train - valid])
}

/// Global uniform shuffle under `seed`, then a proportional cut.
pub fn split(ds: &InteractionDataset, ratios: [u32; 3], seed: u64) -> Result<SplitDataset> {
    let sizes = split_sizes(ds.len(), ratios)?;
    if ds.len() < 10 {
        return Err(Error::Argument(format!(
            "need at least 10 interactions to split, got {}",
            ds.len()
        )));
    }
    let mut edges = ds.interactions.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);
    let test = edges.split_off(sizes[0] + sizes[1]);
    let validation = edges.split_off(sizes[0]);
    Ok(SplitDataset {
        n_users: ds.n_users,
        n_items: ds.n_items,
        train: edges,
        validation,
        test,
        split_seed: seed,
        kcore: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub n_users: usize,
    pub n_items: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub seed: u64,
    pub kcore: usize,
}

impl SplitDataset {
    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            n_users: self.n_users,
            n_items: self.n_items,
            train: self.train.len(),
            validation: self.validation.len(),
            test: self.test.len(),
            seed: self.split_seed,
            kcore: self.kcore,
        }
    }

    /// Writes `train.tsv`, `valid.tsv`, `test.tsv` and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, edges) in [
            (TRAIN_FILE, &self.train),
            (VALID_FILE, &self.validation),
            (TEST_FILE, &self.test),
        ] {
            write_edges(&dir.join(name), edges)?;
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<SplitDataset> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: SplitManifest = serde_json::from_str(&text)?;
        let read = |name: &str| read_edges(&dir.join(name), manifest.n_users, manifest.n_items);
        let split = SplitDataset {
            n_users: manifest.n_users,
            n_items: manifest.n_items,
            train: read(TRAIN_FILE)?,
            validation: read(VALID_FILE)?,
            test: read(TEST_FILE)?,
            split_seed: manifest.seed,
            kcore: manifest.kcore,
        };
        if split.manifest() != manifest {
            return Err(Error::Config(format!(
                "{} disagrees with edge files in {}",
                MANIFEST_FILE,
                dir.display()
            )));
        }
        Ok(split)
    }
}

pub fn write_edges(path: &Path, edges: &[Edge]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for &(u, i) in edges {
        writeln!(out, "{u}\t{i}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dense-id edge file, checking ids against `n_users`/`n_items`.
pub fn read_edges(path: &Path, n_users: usize, n_items: usize) -> Result<Vec<Edge>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut edges = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: idx + 1,
            message,
        };
        let mut cols = line.split_whitespace().map(str::parse::<usize>);
        let (u, i) = match (cols.next(), cols.next()) {
            (Some(Ok(u)), Some(Ok(i))) => (u, i),
            _ => return Err(parse_err(format!("expected two dense ids, got {line:?}"))),
        };
        if u >= n_users || i >= n_items {
            return Err(parse_err(format!(
                "edge ({u}, {i}) outside id space {n_users}x{n_items}"
            )));
        }
        edges.push((u, i));
    }
    Ok(edges)
}

/// Synthetic community data: users and items are dealt round-robin into
/// `blocks` groups and each within-group pair is an interaction with
/// probability `density`. No cross-group edges.
pub fn planted_blocks(
    n_users: usize,
    n_items: usize,
    blocks: usize,
    density: f64,
    seed: u64,
) -> InteractionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user_tokens: Vec<String> = (0..n_users).map(|u| format!("u{u}")).collect();
    let item_tokens: Vec<String> = (0..n_items).map(|i| format!("i{i}")).collect();
    let mut pairs = Vec::new();
    for (u, ut) in user_tokens.iter().enumerate() {
        for (i, it) in item_tokens.iter().enumerate() {
            if u % blocks == i % blocks && rng.random::<f64>() < density {
                pairs.push((ut.as_str(), it.as_str()));
            }
        }
    }
    InteractionDataset::from_pairs(pairs)
}

/// Block label used by [`planted_blocks`] for a token like `u7` or `i12`.
pub fn planted_block_of(token: &str, blocks: usize) -> Option<usize> {
    token.get(1..)?.parse::<usize>().ok().map(|x| x % blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn ds(pairs: &[(&str, &str)]) -> InteractionDataset {
        InteractionDataset::from_pairs(pairs.iter().copied())
    }

    /// Peels any node with degree < k, one node at a time, in the given
    /// scan order; the reference for the maximal core.
    fn brute_core(edges: &BTreeSet<(String, String)>, k: usize) -> BTreeSet<(String, String)> {
        let mut left = edges.clone();
        loop {
            let mut deg: HashMap<String, usize> = HashMap::new();
            for (u, i) in &left {
                *deg.entry(format!("u:{u}")).or_default() += 1;
                *deg.entry(format!("i:{i}")).or_default() += 1;
            }
            let victim = left
                .iter()
                .find(|(u, i)| deg[&format!("u:{u}")] < k || deg[&format!("i:{i}")] < k)
                .cloned();
            match victim {
                Some(e) => {
                    left.remove(&e);
                }
                None => return left,
            }
        }
    }

    fn token_edges(ds: &InteractionDataset) -> BTreeSet<(String, String)> {
        ds.interactions
            .iter()
            .map(|&(u, i)| {
                (
                    ds.user_ids.token(u).unwrap().to_owned(),
                    ds.item_ids.token(i).unwrap().to_owned(),
                )
            })
            .collect()
    }

    #[test]
    fn load_dedups_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.tsv");
        fs::write(&path, "u1 iA\nu1\tiA\n\nu2 iB 5 1700000000\n").unwrap();
        let ds = load_interactions(&path, InputFormat::Tsv).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!((ds.n_users, ds.n_items), (2, 2));
        assert_eq!(ds.interactions, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn load_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.tsv");
        fs::write(&path, "").unwrap();
        let ds = load_interactions(&path, InputFormat::Tsv).unwrap();
        assert_eq!((ds.n_users, ds.n_items, ds.len()), (0, 0, 0));
    }

    #[test]
    fn load_reports_line_and_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.tsv");
        fs::write(&path, "u1 i1\nlonely\n").unwrap();
        match load_interactions(&path, InputFormat::Tsv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let missing = dir.path().join("nope.tsv");
        let err = load_interactions(&missing, InputFormat::Tsv).unwrap_err();
        assert!(err.to_string().contains("nope.tsv"));
    }

    #[test]
    fn kcore_star_collapses() {
        let pairs: Vec<(String, String)> =
            (0..5).map(|i| ("u".to_owned(), format!("i{i}"))).collect();
        let d = InteractionDataset::from_pairs(pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())));
        let core = kcore_filter(&d, 5);
        assert!(core.is_empty());
        assert_eq!((core.n_users, core.n_items), (0, 0));
    }

    #[test]
    fn kcore_complete_bipartite_unchanged() {
        let us: Vec<String> = (0..5).map(|u| format!("u{u}")).collect();
        let is: Vec<String> = (0..5).map(|i| format!("i{i}")).collect();
        let pairs: Vec<(&str, &str)> = us
            .iter()
            .flat_map(|u| is.iter().map(move |i| (u.as_str(), i.as_str())))
            .collect();
        let d = InteractionDataset::from_pairs(pairs);
        assert_eq!(kcore_filter(&d, 5), d);
    }

    #[test]
    fn kcore_chain_matches_peeling_oracle() {
        let d = ds(&[("u1", "i1"), ("u1", "i2"), ("u2", "i2")]);
        let expected = brute_core(&token_edges(&d), 2);
        // i1 and u2 have degree 1; after removing them nothing survives.
        assert!(expected.is_empty());
        assert_eq!(token_edges(&kcore_filter(&d, 2)), expected);
    }

    #[test]
    fn kcore_one_is_identity() {
        let d = ds(&[("a", "x"), ("b", "y"), ("a", "y")]);
        assert_eq!(kcore_filter(&d, 1), d);
    }

    #[test]
    fn split_ten_is_exact() {
        let pairs: Vec<(String, String)> =
            (0..10).map(|x| (format!("u{x}"), format!("i{x}"))).collect();
        let d = InteractionDataset::from_pairs(pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())));
        let s = split(&d, [7, 1, 2], 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (7, 1, 2));
        assert_eq!(s, split(&d, [7, 1, 2], 3).unwrap());
    }

    #[test]
    fn split_sizes_for_large_count() {
        // floor(0.7 N), floor(0.1 N), remainder.
        assert_eq!(split_sizes(173_111, [7, 1, 2]).unwrap(), [121_177, 17_311, 34_623]);
        let s = split_sizes(173_111, [7, 1, 2]).unwrap();
        assert!(s[0].abs_diff(121_178) <= 1 && s[2].abs_diff(34_622) <= 1);
    }

    #[test]
    fn split_rejects_zero_ratio() {
        let d = planted_blocks(10, 10, 1, 1.0, 0);
        assert!(matches!(split(&d, [7, 0, 2], 0), Err(Error::Config(_))));
        let tiny = ds(&[("a", "x")]);
        assert!(matches!(split(&tiny, [7, 1, 2], 0), Err(Error::Argument(_))));
    }

    #[test]
    fn split_round_trips_through_files() {
        let d = planted_blocks(20, 30, 2, 0.4, 9);
        let mut s = split(&d, [7, 1, 2], 11).unwrap();
        s.kcore = 5;
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        assert_eq!(SplitDataset::load(dir.path()).unwrap(), s);
    }

    fn arb_dataset() -> impl Strategy<Value = InteractionDataset> {
        prop::collection::vec((0u8..12, 0u8..15), 0..120).prop_map(|pairs| {
            let pairs: Vec<(String, String)> = pairs
                .into_iter()
                .map(|(u, i)| (format!("u{u}"), format!("i{i}")))
                .collect();
            InteractionDataset::from_pairs(pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())))
        })
    }

    proptest! {
        #[test]
        fn kcore_is_idempotent_maximal_core(d in arb_dataset(), k in 1usize..5) {
            let core = kcore_filter(&d, k);
            prop_assert_eq!(&kcore_filter(&core, k), &core);
            prop_assert_eq!(token_edges(&core), brute_core(&token_edges(&d), k));
            prop_assert!(core.user_degrees().iter().all(|&x| x >= k));
            prop_assert!(core.item_degrees().iter().all(|&x| x >= k));
            for u in 0..core.n_users {
                let tok = core.user_ids.token(u).unwrap();
                prop_assert_eq!(core.user_ids.get(tok), Some(u));
            }
        }

        #[test]
        fn split_is_a_partition(d in arb_dataset(), seed in any::<u64>()) {
            prop_assume!(d.len() >= 10);
            let s = split(&d, [7, 1, 2], seed).unwrap();
            let mut all: Vec<Edge> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
            let mut parent = d.interactions.clone();
            all.sort_unstable();
            parent.sort_unstable();
            prop_assert_eq!(all, parent);
        }
    }
}
