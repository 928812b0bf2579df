//! The `flowcast` command line: train, forecast, eval, sweep and synth.
//!
//! Settings come from an INI file (`--config`) and `--section.key=value`
//! flags, which win. Every command writes a JSON manifest next to its
//! outputs.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::data::{
    load_csv, normalize_window, pool_round_robin, prepare, synth_generate, ContextBins, DataConfig, Dataset,
    SynthKind, MAX_DATASETS,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_threaded, forecast, run_sweep, sweep_csv, ForecastConfig};
use crate::train::{fit, load_checkpoint, save_checkpoint, write_history_csv, Checkpoint, TrainConfig};

pub use config::{all_keys, EvalSettings, RunConfig, SweepSettings, SECTIONS};

#[derive(Debug, Parser)]
#[command(name = "flowcast", version, about = "Autoregressive flow forecaster")]
pub struct Cli {
    /// INI file with [model], [train], [data], [eval] and [sweep] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed for initialization, training and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Evaluation worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on one or more CSV datasets (several are pooled).
    Train {
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
    },
    /// Forecast the rows following an input CSV.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// Which training dataset's context statistics to use.
        #[arg(long, default_value_t = 0)]
        dataset_id: usize,
    },
    /// Test-split metrics per horizon.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run a one-axis sweep described by an INI spec file.
    Sweep {
        spec: PathBuf,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
    },
    /// Write a synthetic univariate series.
    Synth {
        #[arg(long, default_value = "sine")]
        kind: String,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Output CSV; defaults to `<out-dir>/synth_<kind>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Process exit status for an error: 2 usage or configuration (including
/// unreadable inputs), 3 data, 4 numeric failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Io { .. } => 2,
        Error::NonFinite(_) => 4,
        _ => 3,
    }
}

/// Splits `--section.key=value` (or `--section.key value`) overrides out of
/// the argument list.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let dotted = a
            .strip_prefix("--")
            .filter(|s| s.split(['=', '.']).next().is_some_and(|sec| SECTIONS.contains(&sec)) && s.contains('.'));
        match dotted {
            Some(body) => match body.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("--{body} needs a value")))?;
                    overrides.push((body.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

/// Parses arguments, runs the command, reports errors on stderr and returns
/// the exit status.
pub fn run(args: impl IntoIterator<Item = String>) -> i32 {
    let (rest, overrides) = match split_overrides(args.into_iter().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn read_config(cli: &Cli, overrides: &[(String, String)], base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = base.unwrap_or_default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_ini(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_base_seed(seed);
    }
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    Ok(cfg)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load_inputs(paths: &[PathBuf]) -> Result<Vec<(Dataset, serde_json::Value)>> {
    if paths.len() > MAX_DATASETS {
        return Err(Error::Config(format!(
            "at most {MAX_DATASETS} datasets can be pooled, got {}",
            paths.len()
        )));
    }
    paths
        .iter()
        .map(|p| {
            if !p.exists() {
                return Err(Error::Config(format!("data file not found: {}", p.display())));
            }
            let ds = load_csv(p)?;
            let info = json!({
                "path": p.display().to_string(),
                "sha256": sha256_file(p)?,
                "rows": ds.len(),
                "channels": ds.channels(),
                "rejected_rows": ds.rejected_rows,
            });
            Ok((ds, info))
        })
        .collect()
}

struct Manifest {
    command: &'static str,
    inputs: Vec<serde_json::Value>,
    outputs: Vec<String>,
    extra: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    fn write(&self, cli: &Cli, cfg: &RunConfig) -> Result<PathBuf> {
        let value = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cli.seed,
            "threads": cli.threads,
            "config": cfg.to_kv(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "settings": self.extra,
        });
        let path = cli.out_dir.join(format!("{}_manifest.json", self.command));
        let text = serde_json::to_string_pretty(&value).expect("manifest is plain JSON");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn data_config(cfg: &RunConfig, dataset_id: usize) -> DataConfig {
    DataConfig {
        dataset_id,
        ..cfg.data.clone()
    }
}

/// Restores the training-time run settings stored in a checkpoint, then
/// layers the current config file and overrides on top. Model settings
/// always come from the checkpoint.
fn checkpoint_config(cli: &Cli, overrides: &[(String, String)], ckpt: &Checkpoint) -> Result<RunConfig> {
    let mut base = RunConfig::default();
    for (k, v) in &ckpt.meta {
        if let Some(name) = k.strip_prefix("run.") {
            if !name.starts_with("model.") && !v.is_empty() {
                base.set(name, v)?;
            }
        }
    }
    if let Some((k, _)) = overrides.iter().find(|(k, _)| k.starts_with("model.")) {
        return Err(Error::Config(format!("{k}: model settings come from the checkpoint")));
    }
    let mut cfg = read_config(cli, overrides, Some(base))?;
    cfg.model = ckpt.config.clone();
    cfg.data.look_back = cfg.model.look_back;
    cfg.data.horizon = cfg.model.horizon;
    if cfg.data.context.n_tokens() != cfg.model.n_context_tokens {
        return Err(Error::Config(format!(
            "data.context={} does not match the checkpoint's {} context tokens",
            cfg.data.context, cfg.model.n_context_tokens
        )));
    }
    Ok(cfg)
}

fn checkpoint_bins(ckpt: &Checkpoint, dataset_id: usize) -> Result<Option<ContextBins>> {
    match ckpt.meta.get(&format!("bins.{dataset_id}")) {
        Some(text) => Ok(Some(ContextBins::from_text(text)?)),
        None => Ok(None),
    }
}

pub fn execute(cli: &Cli, overrides: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
    match &cli.command {
        Command::Train { data } => cmd_train(cli, overrides, data),
        Command::Forecast {
            checkpoint,
            input,
            horizon,
            nfe,
            samples,
            channel,
            dataset_id,
        } => cmd_forecast(cli, overrides, checkpoint, input, *horizon, *nfe, *samples, *channel, *dataset_id),
        Command::Eval {
            checkpoint,
            data,
            horizons,
            nfe,
            samples,
        } => cmd_eval(cli, overrides, checkpoint, data, horizons, *nfe, *samples),
        Command::Sweep { spec, data } => cmd_sweep(cli, overrides, spec, data),
        Command::Synth { kind, n, noise, out } => cmd_synth(cli, overrides, kind, *n, *noise, out.as_deref()),
    }
}

fn cmd_train(cli: &Cli, overrides: &[(String, String)], paths: &[PathBuf]) -> Result<()> {
    let mut cfg = read_config(cli, overrides, None)?;
    cfg.resolve()?;
    let inputs = load_inputs(paths)?;
    let mut manifest = Manifest::new("train");
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut meta = BTreeMap::new();
    for (i, (ds, info)) in inputs.iter().enumerate() {
        let prepared = prepare(ds, &data_config(&cfg, i))?;
        if let Some(b) = &prepared.bins {
            meta.insert(format!("bins.{i}"), b.to_text());
        }
        meta.insert(format!("data.{i}.name"), ds.name.clone());
        meta.insert(format!("data.{i}.sha256"), info["sha256"].as_str().unwrap_or_default().to_string());
        train.push(prepared.train);
        val.push(prepared.val);
        manifest.inputs.push(info.clone());
    }
    let train = pool_round_robin(train);
    let val = pool_round_robin(val);
    for (k, v) in cfg.to_kv() {
        meta.insert(format!("run.{k}"), v);
    }

    let model = Backbone::new(cfg.model.clone(), cfg.train.seed)?;
    let tc: &TrainConfig = &cfg.train;
    eprintln!(
        "training {} parameters on {} windows ({} validation)",
        model.params().num_scalars(),
        train.len(),
        val.len()
    );
    let out = fit(model, &train, &val, tc, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val mse {:.5}  val mae {:.5}",
            r.epoch, r.train_loss, r.val_mse, r.val_mae
        );
    })?;

    let mut best = Checkpoint::new(&out.best);
    best.history = out.history.clone();
    best.meta = meta.clone();
    best.meta.insert("best_epoch".into(), out.best_epoch.to_string());
    let mut last = Checkpoint::new(&out.last);
    last.optimizer = Some(out.optimizer);
    last.history = out.history.clone();
    last.meta = meta;

    let best_path = cli.out_dir.join("best.ckpt");
    let last_path = cli.out_dir.join("last.ckpt");
    let history_path = cli.out_dir.join("history.csv");
    save_checkpoint(&best_path, &best)?;
    save_checkpoint(&last_path, &last)?;
    write_history_csv(&history_path, &out.history)?;
    manifest.outputs = [&best_path, &last_path, &history_path]
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    manifest.extra.insert("lr".into(), json!(cfg.train.lr));
    manifest.extra.insert("best_epoch".into(), json!(out.best_epoch));
    manifest.write(cli, &cfg)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_forecast(
    cli: &Cli,
    overrides: &[(String, String)],
    checkpoint: &Path,
    input: &Path,
    horizon: Option<usize>,
    nfe: Option<usize>,
    samples: Option<usize>,
    channel: usize,
    dataset_id: usize,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = checkpoint_config(cli, overrides, &ckpt)?;
    let model = ckpt.model()?;
    let mc = model.config();
    let horizon = horizon.unwrap_or(mc.horizon);
    if horizon == 0 || horizon > mc.horizon {
        return Err(Error::Config(format!(
            "--horizon {horizon} must lie in 1..={}: the checkpoint generates {} patches of {} steps",
            mc.horizon,
            mc.n_pred_patches(),
            mc.patch_size
        )));
    }
    let mut inputs = load_inputs(&[input.to_path_buf()])?;
    let (ds, info) = inputs.remove(0);
    if channel >= ds.channels() {
        return Err(Error::Config(format!(
            "--channel {channel} out of range ({} channels)",
            ds.channels()
        )));
    }
    if ds.len() < mc.look_back {
        return Err(Error::Data(format!(
            "{} has {} rows, the model needs a look-back of {}",
            input.display(),
            ds.len(),
            mc.look_back
        )));
    }
    let bins = checkpoint_bins(&ckpt, dataset_id)?;
    let origin = ds.len() - mc.look_back;
    let raw = ds.channel(channel, origin..ds.len());
    let window = normalize_window(&raw, mc.look_back, &data_config(&cfg, dataset_id), bins.as_ref(), channel, origin)?;
    let fc = ForecastConfig {
        nfe: nfe.unwrap_or(cfg.eval.nfe),
        samples: samples.unwrap_or(cfg.eval.samples),
        seed: cfg.eval.seed,
        horizon: Some(horizon),
    };
    let r = forecast(&model, &window, 0, &fc)?;
    let mut csv = String::from("step,mean,q10,q25,q75,q90\n");
    for k in 0..horizon {
        let _ = writeln!(
            csv,
            "{},{:?},{:?},{:?},{:?},{:?}",
            k + 1,
            r.mean[k],
            r.q10[k],
            r.q25[k],
            r.q75[k],
            r.q90[k]
        );
    }
    let out = cli.out_dir.join("forecast.csv");
    write_text(&out, &csv)?;

    let mut manifest = Manifest::new("forecast");
    manifest.inputs = vec![
        info,
        json!({"path": checkpoint.display().to_string(), "sha256": sha256_file(checkpoint)?}),
    ];
    manifest.outputs = vec![out.display().to_string()];
    manifest.extra.insert("horizon".into(), json!(horizon));
    manifest.extra.insert("nfe".into(), json!(fc.nfe));
    manifest.extra.insert("samples".into(), json!(fc.samples));
    manifest.extra.insert("channel".into(), json!(channel));
    manifest.extra.insert("dataset_id".into(), json!(dataset_id));
    manifest.write(cli, &cfg)?;
    Ok(())
}

pub const EVAL_HEADER: &str = "dataset,horizon,seed,mse,mae,coverage50,coverage80,nfe";

fn cmd_eval(
    cli: &Cli,
    overrides: &[(String, String)],
    checkpoint: &Path,
    paths: &[PathBuf],
    horizons: &[usize],
    nfe: Option<usize>,
    samples: Option<usize>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = checkpoint_config(cli, overrides, &ckpt)?;
    let model = ckpt.model()?;
    let horizons = if horizons.is_empty() { cfg.eval.horizons.clone() } else { horizons.to_vec() };
    let max_h = model.config().horizon;
    if let Some(h) = horizons.iter().find(|&&h| h == 0 || h > max_h) {
        return Err(Error::Config(format!(
            "horizon {h} must lie in 1..={max_h} for this checkpoint"
        )));
    }
    let inputs = load_inputs(paths)?;
    let mut manifest = Manifest::new("eval");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let mut csv = format!("{EVAL_HEADER}\n");
    for (i, (ds, info)) in inputs.iter().enumerate() {
        let dc = data_config(&cfg, i);
        let bins = checkpoint_bins(&ckpt, i)?;
        let splits = crate::data::split(ds.len(), dc.split, dc.look_back, dc.horizon)?;
        let test = crate::data::make_windows(ds, splits.test, &dc, dc.eval_stride, bins.as_ref())?;
        for &h in &horizons {
            let fc = ForecastConfig {
                nfe: nfe.unwrap_or(cfg.eval.nfe),
                samples: samples.unwrap_or(cfg.eval.samples),
                seed: cfg.eval.seed,
                horizon: Some(h),
            };
            let s = evaluate_threaded(&model, &test, &fc, cli.threads)?;
            let _ = writeln!(
                csv,
                "{},{},{},{:?},{:?},{},{},{}",
                ds.name,
                h,
                fc.seed,
                s.mse,
                s.mae,
                opt(s.coverage50),
                opt(s.coverage80),
                s.nfe
            );
        }
        manifest.inputs.push(info.clone());
    }
    let out = cli.out_dir.join("eval.csv");
    write_text(&out, &csv)?;
    manifest
        .inputs
        .push(json!({"path": checkpoint.display().to_string(), "sha256": sha256_file(checkpoint)?}));
    manifest.outputs = vec![out.display().to_string()];
    manifest.extra.insert("horizons".into(), json!(horizons));
    manifest.write(cli, &cfg)?;
    Ok(())
}

fn cmd_sweep(cli: &Cli, overrides: &[(String, String)], spec_path: &Path, paths: &[PathBuf]) -> Result<()> {
    let mut cfg = read_config(cli, overrides, None)?;
    let text = std::fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    cfg.apply_ini(&text)
        .map_err(|e| Error::Config(format!("{}: {}", spec_path.display(), e)))?;
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.resolve()?;
    let spec = cfg.sweep_spec()?;
    let inputs = load_inputs(paths)?;
    let datasets: Vec<Dataset> = inputs.iter().map(|(d, _)| d.clone()).collect();
    let rows = run_sweep(&spec, &datasets, |r| {
        eprintln!(
            "{}={} {} h={} seed={} mse {:.5} mae {:.5}",
            r.axis, r.cell, r.dataset, r.horizon, r.seed, r.mse, r.mae
        );
    })?;
    let out = cli.out_dir.join("sweep.csv");
    write_text(&out, &sweep_csv(&rows))?;
    let mut manifest = Manifest::new("sweep");
    manifest.inputs = inputs.into_iter().map(|(_, i)| i).collect();
    manifest
        .inputs
        .push(json!({"path": spec_path.display().to_string(), "sha256": sha256_file(spec_path)?}));
    manifest.outputs = vec![out.display().to_string()];
    manifest.extra.insert("rows".into(), json!(rows.len()));
    manifest.write(cli, &cfg)?;
    Ok(())
}

fn cmd_synth(
    cli: &Cli,
    overrides: &[(String, String)],
    kind: &str,
    n: usize,
    noise: f64,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = read_config(cli, overrides, None)?;
    let kind: SynthKind = kind.parse()?;
    let seed = cli.seed.unwrap_or(0);
    let ds = synth_generate(kind, n, noise, seed)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cli.out_dir.join(format!("synth_{kind}.csv")));
    ds.write_csv(&path)?;
    let mut manifest = Manifest::new("synth");
    manifest.outputs = vec![path.display().to_string()];
    manifest.extra.insert("kind".into(), json!(kind.to_string()));
    manifest.extra.insert("n".into(), json!(n));
    manifest.extra.insert("noise_std".into(), json!(noise));
    manifest.extra.insert("sha256".into(), json!(sha256_file(&path)?));
    manifest.write(cli, &cfg)?;
    Ok(())
}
