use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use topkgat::analysis::{
    training_trajectory_report, write_degree_csv, write_trajectory_csv, BetaRankSnapshot, DEGREE_CSV, TRAJECTORY_CSV,
};
use topkgat::data::{kcore_filter, load_interactions, split, InputFormat};
use topkgat::eval::{evaluate_all, Stage};
use topkgat::model::{checkpoint, propagate};
use topkgat::trainer::{fit, fit_with_observer, grid_search, EpochRecord, FitResult, GridCell};
use topkgat::{Activation, BipartiteGraph, Error, EvalReport, Hyperparams, ModelParams, Result, SplitDataset};

use crate::config::{RunConfig, CONFIG_ECHO};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const LEADERBOARD_CSV: &str = "grid_leaderboard.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const SPLIT_RATIOS: [u32; 3] = [7, 1, 2];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn write_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for rec in log {
        text.push_str(&serde_json::to_string(rec)?);
        text.push('\n');
    }
    write_file(path, text)
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join(CONFIG_ECHO), cfg.to_text())
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.require("out_dir")?;
    create_dir(dir)?;
    echo_config(cfg, dir)?;
    Ok(dir)
}

fn load_split(cfg: &RunConfig) -> Result<SplitDataset> {
    SplitDataset::load(cfg.require("data_dir")?)
}

fn train_graph(s: &SplitDataset) -> Result<BipartiteGraph> {
    BipartiteGraph::build(s.n_users, s.n_items, &s.train)
}

fn test_report(p: &ModelParams, s: &SplitDataset, k: usize) -> Result<EvalReport> {
    let trace = propagate(p, &train_graph(s)?)?;
    evaluate_all(p, &trace, s, Stage::Test, k)
}

fn print_summary(r: &EvalReport) {
    println!(
        "test users={} precision@{k}={:.6} recall@{k}={:.6} ndcg@{k}={:.6}",
        r.evaluated_users,
        r.precision,
        r.recall,
        r.ndcg,
        k = r.k
    );
}

/// Raw file → k-core → 7:1:2 split, written to `out_dir`.
pub fn prepare(cfg: &RunConfig) -> Result<()> {
    let raw = cfg.require("raw")?;
    let dir = out_dir(cfg)?;
    let ds = load_interactions(raw, InputFormat::Tsv)?;
    info!("loaded {} interactions ({} users, {} items)", ds.len(), ds.n_users, ds.n_items);
    let filtered = kcore_filter(&ds, cfg.kcore);
    let mut s = split(&filtered, SPLIT_RATIOS, cfg.seed)?;
    s.kcore = cfg.kcore;
    s.save(dir)?;
    let m = s.manifest();
    println!(
        "users={} items={} interactions={} train={} valid={} test={}",
        m.n_users,
        m.n_items,
        m.train + m.validation + m.test,
        m.train,
        m.validation,
        m.test
    );
    Ok(())
}

fn snapshot_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.bin"))
}

/// Fits, writes checkpoint, log and snapshots; on divergence the last good
/// checkpoint and the partial log are written before the error is returned.
fn train_into(cfg: &RunConfig, s: &SplitDataset, hyper: &Hyperparams, dir: &Path) -> Result<FitResult> {
    let snaps = dir.join(SNAPSHOT_DIR);
    create_dir(&snaps)?;
    let mut snap_err = None;
    let result = fit_with_observer(s, &cfg.train, hyper, |epoch, p, _| {
        if snap_err.is_none() {
            snap_err = checkpoint::save(p, &snapshot_path(&snaps, epoch)).err();
        }
    });
    if let Some(e) = snap_err {
        return Err(e);
    }
    match result {
        Ok(r) => {
            checkpoint::save(&r.best, &dir.join(CHECKPOINT_FILE))?;
            write_log(&dir.join(TRAIN_LOG), &r.log)?;
            Ok(r)
        }
        Err(Error::Diverged { epoch, detail, partial }) => {
            checkpoint::save(&partial.best, &dir.join(CHECKPOINT_FILE))?;
            write_log(&dir.join(TRAIN_LOG), &partial.log)?;
            Err(Error::Diverged { epoch, detail, partial })
        }
        Err(e) => Err(e),
    }
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let s = load_split(cfg)?;
    let dir = out_dir(cfg)?;
    let r = train_into(cfg, &s, &cfg.hyper, dir)?;
    info!("best epoch {} val ndcg {:.6}", r.best_epoch, r.best_val_ndcg);
    let report = test_report(&r.best, &s, cfg.train.eval_k)?;
    write_json(&dir.join(EVAL_REPORT), &report)?;
    print_summary(&report);
    Ok(())
}

fn write_leaderboard(path: &Path, board: &[GridCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for cell in board {
        w.serialize(cell)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn grid(cfg: &RunConfig) -> Result<()> {
    let s = load_split(cfg)?;
    let dir = out_dir(cfg)?;
    let r = grid_search(&s, &cfg.grid, &cfg.train, &cfg.hyper)?;
    write_leaderboard(&dir.join(LEADERBOARD_CSV), &r.leaderboard)?;
    checkpoint::save(&r.best_fit.best, &dir.join(CHECKPOINT_FILE))?;
    write_log(&dir.join(TRAIN_LOG), &r.best_fit.log)?;
    let report = test_report(&r.best_fit.best, &s, cfg.train.eval_k)?;
    write_json(&dir.join(EVAL_REPORT), &report)?;
    println!(
        "best lr={} weight_decay={} layers={} val ndcg={:.6}",
        r.best_config.lr, r.best_config.weight_decay, r.best_hyper.layers, r.best_fit.best_val_ndcg
    );
    print_summary(&report);
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, path: &Path, s: &SplitDataset) -> Result<ModelParams> {
    let p = checkpoint::load(path, cfg.hyper.tau, cfg.hyper.lambda)?;
    if p.n_users != s.n_users || p.n_items != s.n_items {
        return Err(Error::Checkpoint(format!(
            "{} is for {}x{}, split is {}x{}",
            path.display(),
            p.n_users,
            p.n_items,
            s.n_users,
            s.n_items
        )));
    }
    Ok(p)
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let s = load_split(cfg)?;
    let p = load_checkpoint(cfg, cfg.require("checkpoint")?, &s)?;
    let report = test_report(&p, &s, cfg.train.eval_k)?;
    if cfg.out_dir.is_some() {
        let dir = out_dir(cfg)?;
        write_json(&dir.join(EVAL_REPORT), &report)?;
    }
    print_summary(&report);
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationRow {
    variant: &'static str,
    activation: &'static str,
    threshold: bool,
    ndcg20: Option<f64>,
    recall20: Option<f64>,
    status: String,
}

/// Band-pass and softmax weights, each with and without thresholds.
pub const ABLATION_CELLS: [(&str, Activation, bool); 4] = [
    ("full", Activation::Bandpass, true),
    ("no_threshold", Activation::Bandpass, false),
    ("softmax", Activation::Softmax, true),
    ("softmax_no_threshold", Activation::Softmax, false),
];

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let s = load_split(cfg)?;
    let dir = out_dir(cfg)?;
    let mut rows = Vec::new();
    for (variant, activation, threshold) in ABLATION_CELLS {
        let h = Hyperparams { activation, use_threshold: threshold, ..cfg.hyper };
        info!("ablation cell {variant}");
        let outcome = fit(&s, &cfg.train, &h).and_then(|r| test_report(&r.best, &s, cfg.train.eval_k));
        let row = match outcome {
            Ok(rep) => AblationRow {
                variant,
                activation: activation.as_str(),
                threshold,
                ndcg20: Some(rep.ndcg),
                recall20: Some(rep.recall),
                status: "ok".into(),
            },
            Err(e) => {
                warn!("ablation cell {variant} failed: {e}");
                AblationRow {
                    variant,
                    activation: activation.as_str(),
                    threshold,
                    ndcg20: None,
                    recall20: None,
                    status: format!("failed: {e}"),
                }
            }
        };
        rows.push(row);
    }
    let path = dir.join(ABLATION_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(&path))?;
    let mut out = std::io::stdout().lock();
    for row in &rows {
        let _ = writeln!(
            out,
            "{:<22} ndcg@{k}={} recall@{k}={} {}",
            row.variant,
            row.ndcg20.map_or("-".into(), |v| format!("{v:.6}")),
            row.recall20.map_or("-".into(), |v| format!("{v:.6}")),
            row.status,
            k = cfg.train.eval_k
        );
    }
    Ok(())
}

/// Epoch encoded in a snapshot file name such as `epoch_0040.bin`.
pub fn epoch_from_name(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    stem.strip_prefix("epoch_")?.parse().ok()
}

fn expand_checkpoints(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "bin"))
                .collect();
            files.sort();
            out.extend(files);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(Error::Io {
                path: p.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such checkpoint"),
            });
        }
    }
    Ok(out)
}

/// One checkpoint: rank by degree bucket. Several: rank trajectory.
pub fn analyze(cfg: &RunConfig, paths: &[PathBuf]) -> Result<()> {
    let mut inputs = paths.to_vec();
    if inputs.is_empty() {
        inputs.push(cfg.require("checkpoint")?.to_path_buf());
    }
    let files = expand_checkpoints(&inputs)?;
    if files.is_empty() {
        return Err(Error::Config("no checkpoint files found".into()));
    }
    let s = load_split(cfg)?;
    let g = train_graph(&s)?;
    let dir = out_dir(cfg)?;
    let mut snaps = Vec::with_capacity(files.len());
    for (k, f) in files.iter().enumerate() {
        let p = load_checkpoint(cfg, f, &s)?;
        let trace = propagate(&p, &g)?;
        let epoch = epoch_from_name(f).unwrap_or(k + 1);
        snaps.push(BetaRankSnapshot::compute(epoch, &p, &trace, &g)?);
    }
    if let [snap] = snaps.as_slice() {
        let path = dir.join(DEGREE_CSV);
        write_degree_csv(&path, &snap.degree_buckets)?;
        println!("wrote {}", path.display());
    } else {
        let rows = training_trajectory_report(&snaps, g.user_degrees())?;
        let path = dir.join(TRAJECTORY_CSV);
        write_trajectory_csv(&path, &rows)?;
        println!("wrote {} ({} checkpoints)", path.display(), snaps.len());
    }
    Ok(())
}
