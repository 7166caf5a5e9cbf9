//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! Criterion 8 needs the Ali-Display raw dump, which is not distributed with
//! the repository: set `TOPKGAT_ALI_RAW=/path/to/raw.tsv` to check the
//! prepared counts, and additionally `TOPKGAT_ALI_TRAIN=1` to train the
//! reference grid cell.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topkgat::analysis::BetaRankSnapshot;
use topkgat::data::{planted_blocks, split, SplitDataset};
use topkgat::eval::{evaluate_all, evaluate_embeddings, ndcg_at_k, precision_recall_at_k, recommend_topk, EvalIndex, Stage};
use topkgat::model::{forward_layer, omega, propagate};
use topkgat::objective::{analytic_grad, finite_diff_grad, relative_error, sigmoid, topk_gradient_term, topk_threshold};
use topkgat::trainer::{fit, loss_and_gradients, total_bpr_loss, Triple};
use topkgat::{Activation, BipartiteGraph, Hyperparams, ModelParams, Scoring, TrainConfig};

type Outcome = Result<String, String>;

enum Status {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random bipartite graph with every user and item touched at least once.
fn random_graph(rng: &mut ChaCha8Rng, n: usize, m: usize, density: f64) -> BipartiteGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for i in 0..m {
            if rng.random::<f64>() < density {
                edges.push((u, i));
            }
        }
    }
    for u in 0..n {
        edges.push((u, rng.random_range(0..m)));
    }
    for i in 0..m {
        edges.push((rng.random_range(0..n), i));
    }
    BipartiteGraph::build(n, m, &edges).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_align, mut worst_grad) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let g = random_graph(&mut rng, 5, 7, 0.4);
        let z = random_matrix(&mut rng, 12, 4, 1.0);
        let beta: Vec<f64> = (0..5).map(|_| rng.random_range(-0.5..0.5)).collect();
        let tau = rng.random_range(0.1..1.5);
        let lambda = rng.random_range(0.0..1.0);
        let h = Hyperparams {
            dim: 4,
            layers: 1,
            tau,
            lambda,
            activation: Activation::Bandpass,
            use_threshold: true,
            normalize_similarity: false,
            scoring: Scoring::FinalLayer,
        };
        let out = forward_layer(z.view(), &beta, &g, &h).map_err(|e| e.to_string())?;
        let term = topk_gradient_term(z.view(), &beta, &g).map_err(|e| e.to_string())?;
        let expect = &z + &((term * 4.0 - &z * lambda) * tau);
        worst_align = worst_align.max(max_abs_diff(&out.embeddings, &expect));

        let a = analytic_grad(z.view(), &beta, &g, lambda).map_err(|e| e.to_string())?;
        let f = finite_diff_grad(z.view(), &beta, &g, lambda, 1e-5).map_err(|e| e.to_string())?;
        worst_grad = worst_grad.max(relative_error(a.as_slice().unwrap(), f.as_slice().unwrap()));
    }
    check(
        worst_align < 1e-10 && worst_grad < 1e-5,
        format!("layer vs ascent step max diff {worst_align:.2e} (< 1e-10); grad vs FD rel err {worst_grad:.2e} (< 1e-5)"),
    )
}

fn fd_bpr(p: &ModelParams, g: &BipartiteGraph, triples: &[Triple], h: f64) -> Vec<f64> {
    let mut q = p.clone();
    let mut out = Vec::with_capacity(p.embeddings.len() + p.beta.len());
    let probe = |q: &mut ModelParams, get: &dyn Fn(&mut ModelParams) -> &mut f64| {
        let orig = *get(q);
        *get(q) = orig + h;
        let fp = total_bpr_loss(q, g, triples).unwrap();
        *get(q) = orig - h;
        let fm = total_bpr_loss(q, g, triples).unwrap();
        *get(q) = orig;
        (fp - fm) / (2.0 * h)
    };
    for idx in 0..p.embeddings.len() {
        out.push(probe(&mut q, &|q| &mut q.embeddings.as_slice_mut().unwrap()[idx]));
    }
    for idx in 0..p.beta.len() {
        out.push(probe(&mut q, &|q| &mut q.beta.as_slice_mut().unwrap()[idx]));
    }
    out
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut worst_cell = String::new();
    let mut cells = 0;
    for act in Activation::ALL {
        for normalize in [true, false] {
            for layers in 1..=3 {
                let g = random_graph(&mut rng, 4, 5, 0.45);
                let h = Hyperparams {
                    dim: 3,
                    layers,
                    tau: 0.6,
                    lambda: 0.4,
                    activation: act,
                    use_threshold: true,
                    normalize_similarity: normalize,
                    scoring: Scoring::FinalLayer,
                };
                let mut p = ModelParams::init(4, 5, h, &mut rng).unwrap();
                p.embeddings = random_matrix(&mut rng, 9, 3, 0.8);
                p.beta = random_matrix(&mut rng, layers, 4, 0.3);
                let triples: Vec<Triple> = (0..8)
                    .map(|_| (rng.random_range(0..4), rng.random_range(0..5), rng.random_range(0..5)))
                    .collect();
                let (_, grads) = loss_and_gradients(&p, &g, &triples).map_err(|e| e.to_string())?;
                let fd = fd_bpr(&p, &g, &triples, 1e-6);
                let err = relative_error(&grads.flatten(), &fd);
                if err > worst {
                    worst = err;
                    worst_cell = format!("{act}/normalize={normalize}/L={layers}");
                }
                cells += 1;
            }
        }
    }
    check(worst < 1e-4, format!("{cells} cells, worst rel err {worst:.2e} at {worst_cell} (< 1e-4)"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (n, m) = (6, 8);
    let g = random_graph(&mut rng, n, m, 0.35);
    let z = random_matrix(&mut rng, n + m, 5, 1.0);
    let h = Hyperparams {
        dim: 5,
        layers: 1,
        tau: 1.0,
        lambda: 1.0,
        activation: Activation::Constant,
        use_threshold: false,
        normalize_similarity: true,
        scoring: Scoring::FinalLayer,
    };
    let out = forward_layer(z.view(), &vec![0.0; n], &g, &h).map_err(|e| e.to_string())?;
    let mut adj = Array2::<f64>::zeros((n + m, n + m));
    for u in 0..n {
        for &i in g.user_neighbors(u).nodes {
            adj[[u, n + i]] = 1.0;
            adj[[n + i, u]] = 1.0;
        }
    }
    let deg: Vec<f64> = adj.rows().into_iter().map(|r| r.sum()).collect();
    let norm = Array2::from_shape_fn((n + m, n + m), |(a, b)| adj[[a, b]] / (deg[a] * deg[b]).sqrt());
    let diff = max_abs_diff(&out.embeddings, &norm.dot(&z));
    check(diff < 1e-12, format!("max abs diff vs dense D^-1/2 A D^-1/2 Z: {diff:.2e} (< 1e-12)"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let c = 1e3;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let m = rng.random_range(5..40);
        // Distinct values on a 0.01 grid, so every gap is at least 0.01.
        let mut pool: Vec<i64> = (-200..200).collect();
        for k in 0..m {
            let j = rng.random_range(k..pool.len());
            pool.swap(k, j);
        }
        let scores: Vec<f64> = pool[..m].iter().map(|&v| v as f64 * 0.01).collect();
        let k = rng.random_range(1..=m);
        let beta = topk_threshold(&scores, k).map_err(|e| e.to_string())?;
        for &s in &scores {
            let v = sigmoid(c * s - c * beta);
            if s == beta {
                if v != 0.5 {
                    return Err(format!("boundary term {v} != 0.5"));
                }
            } else {
                let indicator = if s > beta { 1.0 } else { 0.0 };
                worst = worst.max((v - indicator).abs());
            }
        }
    }
    check(worst < 1e-3, format!("50 vectors, worst non-boundary gap {worst:.2e} (< 1e-3), boundary terms exactly 0.5"))
}

fn criterion_5() -> Outcome {
    let at0 = omega(0.0);
    let mut asym = 0.0f64;
    let mut monotone = true;
    let n = 10_000;
    let mut prev = f64::INFINITY;
    for k in 0..=n {
        let x = 40.0 * k as f64 / n as f64;
        asym = asym.max((omega(x) - omega(-x)).abs());
        let v = omega(x);
        if v > prev {
            monotone = false;
        }
        prev = v;
    }
    let far = omega(50.0);
    let huge = omega(1e6);
    check(
        at0 == 1.0 && asym <= 1e-15 && monotone && far < 1e-20 && far.is_finite() && huge == 0.0,
        format!("omega(0)={at0}, max asymmetry {asym:.1e}, monotone on [0,40]: {monotone}, omega(50)={far:.2e}"),
    )
}

fn oracle_topk(scores: &[f64], exclude: &[usize], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = scores.iter().copied().zip(0..).filter(|(_, i)| !exclude.contains(i)).collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let m = rng.random_range(3..60);
        // Coarse values force ties.
        let scores: Vec<f64> = (0..m).map(|_| rng.random_range(0..12) as f64 / 3.0).collect();
        let exclude: Vec<usize> = (0..m).filter(|_| rng.random::<f64>() < 0.2).collect();
        let mut targets: Vec<usize> = (0..m).filter(|i| !exclude.contains(i) && rng.random::<f64>() < 0.3).collect();
        if targets.is_empty() {
            targets.push((0..m).find(|i| !exclude.contains(i)).unwrap_or(0));
        }
        let k = rng.random_range(1..=25);
        let recs = recommend_topk(&scores, &exclude, k);
        let expect = oracle_topk(&scores, &exclude, k);
        if recs != expect {
            return Err(format!("case {case}: top-K {recs:?} != oracle {expect:?}"));
        }
        let hits: Vec<bool> = expect.iter().map(|i| targets.contains(i)).collect();
        let count = hits.iter().filter(|&&h| h).count() as f64;
        let dcg: f64 = hits.iter().enumerate().filter(|(_, &h)| h).map(|(r, _)| 1.0 / (r as f64 + 2.0).log2()).sum();
        let idcg: f64 = (1..=targets.len().min(k)).map(|r| 1.0 / (r as f64 + 1.0).log2()).sum();
        let (p, r) = precision_recall_at_k(&recs, &targets, k).map_err(|e| e.to_string())?;
        let nd = ndcg_at_k(&recs, &targets, k).map_err(|e| e.to_string())?;
        for (got, want) in [(p, count / k as f64), (r, count / targets.len() as f64), (nd, dcg / idcg)] {
            worst = worst.max((got - want).abs());
        }
    }
    check(worst <= 1e-12, format!("1000 instances, top-K exact, worst metric diff {worst:.1e} (<= 1e-12)"))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let s = split(&planted_blocks(40, 60, 2, 0.3, 7), [7, 1, 2], 7).map_err(|e| e.to_string())?;
        let h = Hyperparams { dim: 16, layers: 2, ..Hyperparams::default() };
        let cfg = TrainConfig {
            lr: 0.01,
            epochs_max: 400,
            patience: 100,
            batch_size: 2048,
            seed: 7,
            ..TrainConfig::default()
        };
        let r = fit(&s, &cfg, &h).map_err(|e| e.to_string())?;
        let g = BipartiteGraph::build(s.n_users, s.n_items, &s.train).map_err(|e| e.to_string())?;
        let trace = propagate(&r.best, &g).map_err(|e| e.to_string())?;
        let trained = evaluate_all(&r.best, &trace, &s, Stage::Test, 20).map_err(|e| e.to_string())?;

        // Control: untrained random embeddings scored directly.
        let control_params = ModelParams::init(s.n_users, s.n_items, h, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let index = EvalIndex::new(&s, Stage::Test);
        let mut control = 0.0;
        let reps = 20;
        for seed in 0..reps {
            let mut p = control_params.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            p.embeddings.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            control += evaluate_embeddings(p.embeddings.view(), s.n_users, &index, 20, false)
                .map_err(|e| e.to_string())?
                .recall;
        }
        control /= reps as f64;

        let first: &BetaRankSnapshot = r.snapshots.first().ok_or("no snapshots")?;
        let last = r.snapshots.last().unwrap();
        let rank_first = first.mean_ranks(g.user_degrees())[0];
        let rank_last = last.mean_ranks(g.user_degrees())[0];
        let secs = start.elapsed().as_secs_f64();
        check(
            trained.recall > 0.5 && (0.2..=0.5).contains(&control) && rank_last < rank_first && secs < 120.0,
            format!(
                "test Recall@20 {:.3} (> 0.5), control {control:.3} (~0.33), layer-1 mean rank epoch {} {rank_first:.1} -> epoch {} {rank_last:.1}, {} epochs in {secs:.2}s single-threaded (< 120s)",
                trained.recall,
                first.epoch,
                last.epoch,
                r.log.len()
            ),
        )
    })
}

fn criterion_8() -> Status {
    let Ok(raw) = std::env::var("TOPKGAT_ALI_RAW") else {
        return Status::Skip("Ali-Display raw dump not available (set TOPKGAT_ALI_RAW)".into());
    };
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let prepared = topkgat_cli::run(["topkgat", "prepare", "--raw", &raw, "--out-dir", data.to_str().unwrap()]);
    if let Err(e) = prepared {
        return Status::Fail(format!("prepare failed: {e}"));
    }
    let s = SplitDataset::load(&data).unwrap();
    let total = s.train.len() + s.validation.len() + s.test.len();
    let counts = format!("n={} m={} |D|={total}", s.n_users, s.n_items);
    if (s.n_users, s.n_items, total) != (17_730, 10_036, 173_111) {
        return Status::Fail(format!("{counts}, expected n=17730 m=10036 |D|=173111"));
    }
    if std::env::var("TOPKGAT_ALI_TRAIN").as_deref() != Ok("1") {
        return Status::Pass(format!("{counts}; training skipped (set TOPKGAT_ALI_TRAIN=1)"));
    }
    let start = Instant::now();
    let h = Hyperparams { layers: 3, ..Hyperparams::default() };
    let cfg = TrainConfig { lr: 0.01, weight_decay: 1e-8, ..TrainConfig::default() };
    let outcome = fit(&s, &cfg, &h).and_then(|r| {
        let g = BipartiteGraph::build(s.n_users, s.n_items, &s.train)?;
        let trace = propagate(&r.best, &g)?;
        evaluate_all(&r.best, &trace, &s, Stage::Test, 20)
    });
    let hours = start.elapsed().as_secs_f64() / 3600.0;
    match outcome {
        Ok(rep) => {
            let badge = if (rep.ndcg - 0.0689).abs() <= 0.15 * 0.0689 { " [within 15% of 0.0689]" } else { "" };
            let detail = format!("{counts}; NDCG@20 {:.4} in {hours:.2}h{badge}", rep.ndcg);
            if rep.ndcg > 0.05 && hours < 2.0 {
                Status::Pass(detail)
            } else {
                Status::Fail(detail)
            }
        }
        Err(e) => Status::Fail(format!("training failed: {e}")),
    }
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                let mut bytes = fs::read(&path).unwrap();
                if rel == "config.txt" {
                    // The echo names its own output directory.
                    let text = String::from_utf8(bytes).unwrap();
                    bytes = text.lines().filter(|l| !l.starts_with("out_dir=")).collect::<Vec<_>>().join("\n").into_bytes();
                }
                out.insert(rel, bytes);
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.tsv");
    let ds = planted_blocks(30, 45, 3, 0.35, 4);
    let mut text = String::new();
    for &(u, i) in &ds.interactions {
        text += &format!("{}\t{}\n", ds.user_ids.token(u).unwrap(), ds.item_ids.token(i).unwrap());
    }
    fs::write(&raw, text).unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let run = |args: &[&str]| topkgat_cli::run(args.iter().copied()).map_err(|e| e.to_string());
    let raw_s = raw.to_str().unwrap();
    for out in ["data_a", "data_b"] {
        run(&["topkgat", "prepare", "--raw", raw_s, "--out-dir", &p(out), "--kcore", "2", "--seed", "7", "--deterministic"])?;
    }
    for out in ["run_a", "run_b"] {
        run(&[
            "topkgat", "train", "--data-dir", &p("data_a"), "--out-dir", &p(out), "--deterministic", "--seed", "7",
            "--dim", "8", "--layers", "2", "--epochs-max", "12", "--batch-size", "64", "--snapshot-every", "4",
        ])?;
    }
    let (da, db) = (read_tree(&dir.path().join("data_a")), read_tree(&dir.path().join("data_b")));
    let (ra, rb) = (read_tree(&dir.path().join("run_a")), read_tree(&dir.path().join("run_b")));
    let files = ra.len() + da.len();
    check(
        da == db && ra == rb && ra.contains_key("checkpoint.bin") && ra.contains_key("train_log.jsonl"),
        format!("prepare and train twice: {files} files byte-identical: {}", da == db && ra == rb),
    )
}

type Criterion = (&'static str, Box<dyn Fn() -> Status>);

fn main() -> ExitCode {
    let criteria: Vec<Criterion> = vec![
        ("1 gradient-ascent alignment", Box::new(|| criterion_1().into())),
        ("2 backprop vs finite differences", Box::new(|| criterion_2().into())),
        ("3 LightGCN reduction", Box::new(|| criterion_3().into())),
        ("4 smooth metric convergence", Box::new(|| criterion_4().into())),
        ("5 band-pass weight properties", Box::new(|| criterion_5().into())),
        ("6 metric oracles", Box::new(|| criterion_6().into())),
        ("7 planted-block learning", Box::new(|| criterion_7().into())),
        ("8 Ali-Display smoke", Box::new(criterion_8)),
        ("9 determinism", Box::new(|| criterion_9().into())),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        match f() {
            Status::Pass(d) => println!("criterion {name}: PASS ({d})"),
            Status::Skip(d) => println!("criterion {name}: SKIP ({d})"),
            Status::Fail(d) => {
                failed += 1;
                println!("criterion {name}: FAIL ({d})");
            }
        }
    }
    println!("acceptance: {} criteria, {failed} failed", criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

impl From<Outcome> for Status {
    fn from(o: Outcome) -> Self {
        match o {
            Ok(d) => Status::Pass(d),
            Err(d) => Status::Fail(d),
        }
    }
}
