//! Flat `key=value` run configuration.
//!
//! Values come from defaults, then an optional config file, then command-line
//! flags. The resolved configuration is written back in the same format, so a
//! run can be repeated with `--config <out_dir>/config.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use topkgat::trainer::Grid;
use topkgat::{Activation, Error, Hyperparams, Result, Scoring, TrainConfig};

pub const CONFIG_ECHO: &str = "config.txt";

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "raw",
    "data_dir",
    "out_dir",
    "checkpoint",
    "kcore",
    "seed",
    "dim",
    "layers",
    "tau",
    "lambda",
    "activation",
    "use_threshold",
    "normalize_similarity",
    "scoring",
    "lr",
    "weight_decay",
    "epochs_max",
    "patience",
    "batch_size",
    "negatives_per_positive",
    "snapshot_every",
    "eval_k",
    "threads",
    "deterministic",
    "grid_lr",
    "grid_weight_decay",
    "grid_layers",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub raw: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub kcore: usize,
    /// Seeds both the split and training.
    pub seed: u64,
    pub hyper: Hyperparams,
    pub train: TrainConfig,
    /// 0 means the rayon default.
    pub threads: usize,
    pub deterministic: bool,
    pub grid: Grid,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            raw: None,
            data_dir: None,
            out_dir: None,
            checkpoint: None,
            kcore: 5,
            seed: train.seed,
            hyper: Hyperparams::default(),
            train,
            threads: 0,
            deterministic: false,
            grid: Grid::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected true or false, got {other:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let out = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<Vec<T>>>()?;
    if out.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(out)
}

fn parse_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let h = &mut self.hyper;
        let t = &mut self.train;
        match key {
            "raw" => self.raw = parse_path(value),
            "data_dir" => self.data_dir = parse_path(value),
            "out_dir" => self.out_dir = parse_path(value),
            "checkpoint" => self.checkpoint = parse_path(value),
            "kcore" => self.kcore = parse(key, value)?,
            "seed" => {
                self.seed = parse(key, value)?;
                t.seed = self.seed;
            }
            "dim" => h.dim = parse(key, value)?,
            "layers" => h.layers = parse(key, value)?,
            "tau" => h.tau = parse(key, value)?,
            "lambda" => h.lambda = parse(key, value)?,
            "activation" => h.activation = value.trim().parse::<Activation>()?,
            "use_threshold" => h.use_threshold = parse_bool(key, value)?,
            "normalize_similarity" => h.normalize_similarity = parse_bool(key, value)?,
            "scoring" => h.scoring = value.trim().parse::<Scoring>()?,
            "lr" => t.lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "epochs_max" => t.epochs_max = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "negatives_per_positive" => t.negatives_per_positive = parse(key, value)?,
            "snapshot_every" => t.snapshot_every = parse(key, value)?,
            "eval_k" => t.eval_k = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "grid_lr" => self.grid.lrs = parse_list(key, value)?,
            "grid_weight_decay" => self.grid.weight_decays = parse_list(key, value)?,
            "grid_layers" => self.grid.layers = parse_list(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (h, t) = (&self.hyper, &self.train);
        Some(match key {
            "raw" => show_path(&self.raw),
            "data_dir" => show_path(&self.data_dir),
            "out_dir" => show_path(&self.out_dir),
            "checkpoint" => show_path(&self.checkpoint),
            "kcore" => self.kcore.to_string(),
            "seed" => self.seed.to_string(),
            "dim" => h.dim.to_string(),
            "layers" => h.layers.to_string(),
            "tau" => h.tau.to_string(),
            "lambda" => h.lambda.to_string(),
            "activation" => h.activation.to_string(),
            "use_threshold" => h.use_threshold.to_string(),
            "normalize_similarity" => h.normalize_similarity.to_string(),
            "scoring" => h.scoring.to_string(),
            "lr" => t.lr.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "epochs_max" => t.epochs_max.to_string(),
            "patience" => t.patience.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "negatives_per_positive" => t.negatives_per_positive.to_string(),
            "snapshot_every" => t.snapshot_every.to_string(),
            "eval_k" => t.eval_k.to_string(),
            "threads" => self.threads.to_string(),
            "deterministic" => self.deterministic.to_string(),
            "grid_lr" => join(&self.grid.lrs),
            "grid_weight_decay" => join(&self.grid.weight_decays),
            "grid_layers" => join(&self.grid.layers),
            _ => return None,
        })
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: n + 1,
                    message: format!("expected key=value, got {line:?}"),
                });
            };
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        self.apply_text(&text, path)
    }

    /// `key=value` for every key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("known key"));
        }
        out
    }

    /// Makes every configured path absolute against the working directory.
    pub fn resolve_paths(&mut self) -> Result<()> {
        for p in [&mut self.raw, &mut self.data_dir, &mut self.out_dir, &mut self.checkpoint]
            .into_iter()
            .flatten()
        {
            *p = std::path::absolute(&*p).map_err(|source| Error::Io { path: p.clone(), source })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.train.validate()?;
        if self.kcore == 0 {
            return Err(Error::Config("kcore must be >= 1".into()));
        }
        Ok(())
    }

    /// The required path `key`, or a configuration error naming it.
    pub fn require(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "raw" => &self.raw,
            "data_dir" => &self.data_dir,
            "out_dir" => &self.out_dir,
            "checkpoint" => &self.checkpoint,
            _ => return Err(Error::Config(format!("{key} is not a path key"))),
        };
        p.as_deref()
            .ok_or_else(|| Error::Config(format!("{key} is required (--{} or {key}= in the config file)", flag_name(key))))
    }

    /// Threads to use: `deterministic` forces 1, then `threads`, then
    /// `TOPKGAT_THREADS`, else 0 (rayon default).
    pub fn effective_threads(&self) -> Result<usize> {
        if self.deterministic {
            return Ok(1);
        }
        if self.threads > 0 {
            return Ok(self.threads);
        }
        match std::env::var("TOPKGAT_THREADS") {
            Ok(v) if !v.trim().is_empty() => parse("TOPKGAT_THREADS", &v),
            _ => Ok(0),
        }
    }
}

/// Command-line spelling of a config key.
pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("tau", "0.3").unwrap();
        c.set("activation", "softmax").unwrap();
        c.set("grid_layers", "1,3").unwrap();
        c.set("data_dir", "/tmp/x").unwrap();
        c.set("use_threshold", "false").unwrap();
        let mut again = RunConfig::default();
        again.apply_text(&c.to_text(), Path::new("config.txt")).unwrap();
        assert_eq!(again, c);
        assert_eq!(c.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("learning_rate", "1"), Err(Error::Config(_))));
        let err = c.apply_text("# comment\n\nlr=0.1\nbogus=3\n", Path::new("f")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
        assert_eq!(c.train.lr, 0.1);
        assert!(c.apply_text("lr 0.1", Path::new("f")).is_err());
    }

    #[test]
    fn seed_reaches_training() {
        let mut c = RunConfig::default();
        c.set("seed", "7").unwrap();
        assert_eq!(c.train.seed, 7);
    }

    #[test]
    fn deterministic_forces_one_thread() {
        let c = RunConfig { deterministic: true, threads: 8, ..RunConfig::default() };
        assert_eq!(c.effective_threads().unwrap(), 1);
        let c = RunConfig { threads: 3, ..RunConfig::default() };
        assert_eq!(c.effective_threads().unwrap(), 3);
    }
}
