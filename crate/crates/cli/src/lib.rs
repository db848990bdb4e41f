//! `feedkit <subcommand> [config=FILE] [key=value | --key=value]...`
//!
//! Subcommands: `train-scratch`, `distill`, `pfeed`, `sfeed`, `evaluate`,
//! `analyze-recon`. Settings come from an optional flat `key=value` file
//! (`#` starts a comment) and are overridden by command-line pairs. The
//! `FEEDKIT_OUT` environment variable, when set, replaces the output
//! directory.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use feedkit_core::losses::LossKind;
use feedkit_core::nn::build_paraphraser;
use feedkit_train::config::TRAIN_KEYS;
use feedkit_train::orchestrator::{
    train, train_distill, train_multi_baseline, train_pfeed, train_scratch, train_sfeed,
};
use feedkit_train::recon::{compare_recon, train_paraphraser, ReconOptions};
use feedkit_train::{evaluate, read_checkpoint, Result, RunRecord, Split, TrainConfig, TrainError};

pub const OUT_ENV: &str = "FEEDKIT_OUT";
const DEFAULT_OUT: &str = "feedkit-out";

const SUBCOMMANDS: &[&str] = &[
    "train-scratch",
    "distill",
    "pfeed",
    "sfeed",
    "evaluate",
    "analyze-recon",
];

/// Keys a subcommand accepts in addition to [`TRAIN_KEYS`].
fn extra_keys(cmd: &str) -> &'static [&'static str] {
    match cmd {
        "sfeed" => &["stacks"],
        "evaluate" => &["ckpt", "split"],
        "analyze-recon" => &[
            "ckpts",
            "rate",
            "recon_epochs",
            "recon_lr",
            "recon_batch_size",
            "recon_momentum",
            "recon_weight_decay",
            "recon_seed",
            "split",
        ],
        _ => &[],
    }
}

fn usage() -> String {
    format!(
        "usage: feedkit <{}> [config=FILE] [key=value | --key=value]...\n",
        SUBCOMMANDS.join("|")
    )
}

/// Runs the CLI with `args` (subcommand first), printing to the process's
/// stdout/stderr and honouring `FEEDKIT_OUT`.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let env_out = std::env::var_os(OUT_ENV).map(PathBuf::from);
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_cli_with(args, env_out, &mut stdout.lock(), &mut stderr.lock())
}

/// [`run_cli`] with explicit output sinks and output-directory override.
pub fn run_cli_with<I, S>(
    args: I,
    env_out: Option<PathBuf>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let args: Vec<String> = args.into_iter().map(|s| s.as_ref().to_string()).collect();
    let Some(cmd) = args.first() else {
        let _ = write!(err, "{}", usage());
        return 1;
    };
    if matches!(cmd.as_str(), "help" | "-h" | "--help") {
        let _ = write!(out, "{}", usage());
        return 0;
    }
    if !SUBCOMMANDS.contains(&cmd.as_str()) {
        let _ = write!(err, "unknown subcommand {cmd:?}\n{}", usage());
        return 1;
    }
    match dispatch(cmd, &args[1..], env_out, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "feedkit {cmd}: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}

/// Settings after merging the config file and the command line.
struct Settings {
    cfg: TrainConfig,
    extra: Vec<(String, String)>,
}

impl Settings {
    fn get(&self, key: &str) -> Option<&str> {
        self.extra
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .trim()
                .parse()
                .map_err(|_| TrainError::Config(format!("invalid value {v:?} for {key}"))),
        }
    }
}

fn parse_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| {
        TrainError::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            TrainError::Config(format!(
                "{}:{}: expected key=value, got {raw:?}",
                path.display(),
                i + 1
            ))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn settings(cmd: &str, args: &[String], env_out: Option<PathBuf>) -> Result<Settings> {
    let mut file = None;
    let mut cli = Vec::new();
    for a in args {
        let a = a.strip_prefix("--").unwrap_or(a);
        let (k, v) = a
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("expected key=value, got {a:?}")))?;
        if k == "config" {
            file = Some(PathBuf::from(v));
        } else {
            cli.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let mut pairs = match &file {
        Some(p) => parse_file(p)?,
        None => Vec::new(),
    };
    pairs.extend(cli);

    let extras = extra_keys(cmd);
    let mut cfg = TrainConfig::default();
    let mut extra = Vec::new();
    for (k, v) in pairs {
        if extras.contains(&k.as_str()) {
            extra.push((k, v));
        } else if !cfg.set(&k, &v)? {
            let mut valid: Vec<&str> = TRAIN_KEYS.to_vec();
            valid.extend_from_slice(extras);
            valid.push("config");
            return Err(TrainError::Config(format!(
                "unknown key {k:?}; valid keys: {}",
                valid.join(", ")
            )));
        }
    }
    if let Some(dir) = env_out {
        cfg.out_dir = Some(dir);
    } else if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from(DEFAULT_OUT));
    }
    Ok(Settings { cfg, extra })
}

fn report(out: &mut dyn Write, r: &RunRecord) {
    let ckpt = r
        .checkpoint
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    let _ = writeln!(
        out,
        "{} stack={} method={} test_error={}% checkpoint={}",
        r.run_id,
        r.stack,
        r.method,
        r.final_test_error(),
        ckpt
    );
}

fn dispatch(
    cmd: &str,
    args: &[String],
    env_out: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<()> {
    let s = settings(cmd, args, env_out)?;
    let mut cfg = s.cfg.clone();
    match cmd {
        "train-scratch" => {
            cfg.validate()?;
            let data = cfg.data.load()?;
            report(out, &train_scratch(&cfg, &data)?.record);
        }
        "distill" => {
            if cfg.distill.method == LossKind::Ce {
                return Err(TrainError::Config(
                    "distill needs method=kd|ban|at|l1|ft|feed".into(),
                ));
            }
            cfg.validate()?;
            let data = cfg.data.load()?;
            let n = cfg.distill.teachers.len();
            let run = match cfg.distill.method {
                _ if n == 1 => train_distill(&cfg, &data)?,
                m @ (LossKind::L1 | LossKind::At | LossKind::Ft) => {
                    train_multi_baseline(&cfg, m, &data)?
                }
                _ => train(&cfg, &data)?,
            };
            report(out, &run.record);
        }
        "pfeed" => {
            cfg.distill.method = LossKind::Feed;
            cfg.validate()?;
            let data = cfg.data.load()?;
            report(out, &train_pfeed(&cfg, &data)?.record);
        }
        "sfeed" => {
            let stacks: usize = s.parse("stacks", 3)?;
            cfg.distill.method = LossKind::Ce;
            cfg.distill.teachers.clear();
            cfg.validate()?;
            let data = cfg.data.load()?;
            for r in train_sfeed(&cfg, stacks, &data)? {
                report(out, &r);
            }
        }
        "evaluate" => {
            let ckpt = PathBuf::from(
                s.get("ckpt")
                    .ok_or_else(|| TrainError::Config("evaluate needs ckpt=PATH".into()))?,
            );
            if !ckpt.is_file() {
                return Err(TrainError::Config(format!(
                    "checkpoint {} not found",
                    ckpt.display()
                )));
            }
            let split: Split = s.parse("split", Split::Test)?;
            let data = cfg.data.load()?;
            let set = match split {
                Split::Train => &data.train,
                Split::Test => &data.test,
            };
            let net = read_checkpoint(&ckpt)?.to_network()?;
            let _ = writeln!(out, "test_error={}%", evaluate(&net, set)?);
        }
        "analyze-recon" => analyze_recon(&s, out)?,
        _ => unreachable!("subcommand checked by caller"),
    }
    Ok(())
}

fn analyze_recon(s: &Settings, out: &mut dyn Write) -> Result<()> {
    let ckpts: Vec<PathBuf> = s
        .get("ckpts")
        .unwrap_or("")
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(PathBuf::from)
        .collect();
    if ckpts.is_empty() {
        return Err(TrainError::Config(
            "analyze-recon needs ckpts=A.ckpt[,B.ckpt...]".into(),
        ));
    }
    for p in &ckpts {
        if !p.is_file() {
            return Err(TrainError::Config(format!(
                "checkpoint {} not found",
                p.display()
            )));
        }
    }
    let defaults = ReconOptions::default();
    let opts = ReconOptions {
        epochs: s.parse("recon_epochs", defaults.epochs)?,
        batch_size: s.parse("recon_batch_size", defaults.batch_size)?,
        lr: s.parse("recon_lr", defaults.lr)?,
        momentum: s.parse("recon_momentum", defaults.momentum)?,
        weight_decay: s.parse("recon_weight_decay", defaults.weight_decay)?,
        seed: s.parse("recon_seed", defaults.seed)?,
    };
    let rate: f64 = s.parse("rate", 0.5)?;
    let split: Split = s.parse("split", Split::Train)?;
    let data = s.cfg.data.load()?;
    let set = match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    };
    let dir = s
        .cfg
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let mut reports = Vec::new();
    for p in &ckpts {
        let net = read_checkpoint(p)?.to_network()?;
        let probe = set.images.select_rows(&[0])?;
        let channels = net.infer(&probe)?.final_tap()?.shape()[1];
        let mut para = build_paraphraser::<f32>(channels, rate, opts.seed)?;
        let id = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        let report = train_paraphraser(&mut para, &net, set, &opts, &id)?;
        report.write_csv(&dir.join(format!("recon-{id}.csv")))?;
        let _ = writeln!(
            out,
            "{id}: final mse_per_element={} sum_sq_error={}",
            report.curve.last().map_or(f64::NAN, |e| e.mse_per_element),
            report.curve.last().map_or(f64::NAN, |e| e.sum_sq_error)
        );
        reports.push(report);
    }
    let summary = compare_recon(&reports)?;
    let path = dir.join("recon-summary.csv");
    fs::write(&path, summary.to_csv())
        .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}
