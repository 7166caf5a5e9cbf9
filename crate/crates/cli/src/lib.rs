//! Command-line driver: `prepare`, `train`, `grid`, `evaluate`, `ablate`,
//! `analyze`.
//!
//! Every command accepts `--config FILE` plus one `--<key> VALUE` flag per
//! configuration key (see [`config::KEYS`]); flags win over the file.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Arg, ArgAction, ArgMatches, Command};
use topkgat::{Error, Result};

use config::{flag_name, RunConfig, KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } | Error::Numeric(_) | Error::Propagation { .. } => EXIT_NUMERIC,
        e if e.is_input_error() => EXIT_INPUT,
        _ => EXIT_FAILURE,
    }
}

fn common_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(clap::value_parser!(PathBuf))
        .help("key=value configuration file")];
    for &key in KEYS.iter().filter(|&&k| k != "deterministic") {
        let flag = flag_name(key);
        let mut arg = Arg::new(key).long(flag.clone()).value_name("VALUE").num_args(1);
        if flag != key {
            arg = arg.alias(key);
        }
        args.push(arg);
    }
    args.push(
        Arg::new("deterministic")
            .long("deterministic")
            .action(ArgAction::SetTrue)
            .help("single-threaded run; identical outputs for identical inputs"),
    );
    args.push(
        Arg::new("no_threshold")
            .long("no-threshold")
            .action(ArgAction::SetTrue)
            .help("fix thresholds at zero (use_threshold=false)"),
    );
    args.push(
        Arg::new("no_normalize")
            .long("no-normalize")
            .action(ArgAction::SetTrue)
            .help("raw dot-product similarity (normalize_similarity=false)"),
    );
    args
}

pub fn command() -> Command {
    let sub = |name: &'static str, about: &'static str| Command::new(name).about(about).args(common_args());
    Command::new("topkgat")
        .about("Top-K graph attention recommender")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("prepare", "k-core filter and split a raw interaction file into out_dir"))
        .subcommand(sub("train", "train on data_dir and write artifacts to out_dir"))
        .subcommand(sub("grid", "grid search over grid_lr x grid_weight_decay x grid_layers"))
        .subcommand(sub("evaluate", "evaluate a checkpoint on the test split"))
        .subcommand(sub("ablate", "train the threshold/activation ablation cells"))
        .subcommand(
            sub("analyze", "threshold-rank reports for one checkpoint or a series").arg(
                Arg::new("checkpoints")
                    .value_name("CHECKPOINT")
                    .num_args(0..)
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("checkpoint files or directories of them"),
            ),
        )
}

/// Defaults, then `--config`, then flags.
pub fn resolve_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        cfg.apply_file(path)?;
    }
    for &key in KEYS.iter().filter(|&&k| k != "deterministic") {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    if m.get_flag("deterministic") {
        cfg.deterministic = true;
    }
    if m.get_flag("no_threshold") {
        cfg.hyper.use_threshold = false;
    }
    if m.get_flag("no_normalize") {
        cfg.hyper.normalize_similarity = false;
    }
    cfg.resolve_paths()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(Error::Argument(e.render().to_string())),
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = resolve_config(sub)?;
    let threads = cfg.effective_threads()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match name {
        "prepare" => commands::prepare(&cfg),
        "train" => commands::train(&cfg),
        "grid" => commands::grid(&cfg),
        "evaluate" => commands::evaluate(&cfg),
        "ablate" => commands::ablate(&cfg),
        "analyze" => {
            let paths: Vec<PathBuf> = sub
                .get_many::<PathBuf>("checkpoints")
                .map(|v| v.cloned().collect())
                .unwrap_or_default();
            commands::analyze(&cfg, &paths)
        }
        other => Err(Error::Argument(format!("unknown command {other}"))),
    })
}
