//! One-axis experiment grids: train each cell, evaluate every horizon, and
//! report one CSV row per (cell, dataset, horizon, seed).

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use crate::backbone::{Backbone, ModelConfig};
use crate::data::{pool_round_robin, prepare, ContextMode, DataConfig, Dataset, Prepared, WindowPair, MAX_DATASETS};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ForecastConfig};
use crate::flow::{HeadKind, ScheduleKind};
use crate::train::{fit, TrainConfig};

/// The single factor a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Nfe,
    Scheduler,
    PatchSize,
    Ablation,
    Head,
    Domain,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::Nfe,
        SweepAxis::Scheduler,
        SweepAxis::PatchSize,
        SweepAxis::Ablation,
        SweepAxis::Head,
        SweepAxis::Domain,
    ];

    pub fn default_cells(self) -> Vec<String> {
        let cells: &[&str] = match self {
            SweepAxis::Nfe => &["1", "2", "3"],
            SweepAxis::Scheduler => &["linear", "cosine"],
            SweepAxis::PatchSize => &["2", "4", "6", "8", "10"],
            SweepAxis::Ablation => &["full", "no_ar", "no_flow", "no_ar_flow"],
            SweepAxis::Head => &["mean_velocity", "vanilla_fm", "diffusion"],
            SweepAxis::Domain => &["in", "cross"],
        };
        cells.iter().map(|c| c.to_string()).collect()
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Nfe => "nfe",
            SweepAxis::Scheduler => "scheduler",
            SweepAxis::PatchSize => "patch_size",
            SweepAxis::Ablation => "ablation",
            SweepAxis::Head => "head",
            SweepAxis::Domain => "domain",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown sweep axis '{s}' (nfe|scheduler|patch_size|ablation|head|domain)"
                ))
            })
    }
}

/// A sweep over one axis. Everything not named by a cell comes from the base
/// configs.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// Cell labels; empty means the axis defaults.
    pub cells: Vec<String>,
    pub seeds: Vec<u64>,
    /// Evaluated horizons; models are trained for the largest.
    pub horizons: Vec<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub samples: usize,
    pub nfe: usize,
    /// Fill the wallclock column; off keeps reports byte-reproducible.
    pub timing: bool,
}

impl SweepSpec {
    pub fn new(axis: SweepAxis) -> Self {
        Self {
            axis,
            cells: Vec::new(),
            seeds: vec![0],
            horizons: vec![12, 24, 36, 48],
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            samples: 20,
            nfe: 1,
            timing: false,
        }
    }

    pub fn resolved_cells(&self) -> Vec<String> {
        if self.cells.is_empty() {
            self.axis.default_cells()
        } else {
            self.cells.clone()
        }
    }
}

/// One report line.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub cell: String,
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub coverage50: Option<f64>,
    pub coverage80: Option<f64>,
    pub nfe: usize,
    pub wallclock_ms: Option<f64>,
}

pub const SWEEP_HEADER: &str = "axis,cell,dataset,horizon,seed,mse,mae,coverage50,coverage80,nfe,wallclock_ms";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:?},{:?},{},{},{},{}",
            r.axis,
            r.cell,
            r.dataset,
            r.horizon,
            r.seed,
            r.mse,
            r.mae,
            opt(r.coverage50),
            opt(r.coverage80),
            r.nfe,
            opt(r.wallclock_ms)
        );
    }
    s
}

/// Concrete settings of one cell.
#[derive(Debug, Clone, PartialEq)]
struct Cell {
    model: ModelConfig,
    data: DataConfig,
    nfe: usize,
    pooled: bool,
}

fn parse_usize(axis: SweepAxis, cell: &str) -> Result<usize> {
    match cell.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(Error::Config(format!("{axis} cell '{cell}' must be a positive integer"))),
    }
}

fn with_context(mut model: ModelConfig, mut data: DataConfig, mode: ContextMode) -> (ModelConfig, DataConfig) {
    data.context = mode;
    model.n_context_tokens = mode.n_tokens();
    (model, data)
}

fn resolve_cell(spec: &SweepSpec, horizon: usize, label: &str) -> Result<Cell> {
    let mut model = spec.model.clone();
    let mut data = spec.data.clone();
    model.horizon = horizon;
    data.horizon = horizon;
    data.look_back = model.look_back;
    let mode = data.context;
    (model, data) = with_context(model, data, mode);
    let mut nfe = spec.nfe;
    let mut pooled = false;
    match spec.axis {
        SweepAxis::Nfe => nfe = parse_usize(spec.axis, label)?,
        SweepAxis::Scheduler => model.scheduler = label.parse::<ScheduleKind>()?,
        SweepAxis::PatchSize => {
            let p = parse_usize(spec.axis, label)?;
            model.patch_size = p;
            model.look_back = (spec.model.look_back / p) * p;
            if model.look_back == 0 {
                return Err(Error::Config(format!(
                    "patch size {p} exceeds look-back {}",
                    spec.model.look_back
                )));
            }
            data.look_back = model.look_back;
        }
        SweepAxis::Ablation => match label {
            "full" => {}
            "no_ar" => model.autoregressive = false,
            "no_flow" => model.head = HeadKind::Regression,
            "no_ar_flow" => {
                model.autoregressive = false;
                model.head = HeadKind::Regression;
            }
            other => {
                let mode: ContextMode = other.parse().map_err(|_| {
                    Error::Config(format!(
                        "unknown ablation cell '{other}' (full|no_ar|no_flow|no_ar_flow|no_domain|no_statistics|no_text)"
                    ))
                })?;
                (model, data) = with_context(model, data, mode);
            }
        },
        SweepAxis::Head => {
            let head: HeadKind = label.parse()?;
            if !head.is_generative() {
                return Err(Error::Config(format!("head cell '{label}' must be a generative head")));
            }
            model.head = head;
        }
        SweepAxis::Domain => match label {
            "in" => {}
            "cross" => pooled = true,
            other => return Err(Error::Config(format!("unknown domain cell '{other}' (in|cross)"))),
        },
    }
    model.validate()?;
    Ok(Cell {
        model,
        data,
        nfe,
        pooled,
    })
}

fn prepare_all(datasets: &[Dataset], data: &DataConfig) -> Result<Vec<Prepared>> {
    datasets
        .iter()
        .enumerate()
        .map(|(i, ds)| {
            let cfg = DataConfig {
                dataset_id: i,
                ..data.clone()
            };
            prepare(ds, &cfg)
        })
        .collect()
}

fn train_model(cell: &Cell, train_cfg: &TrainConfig, train: &[WindowPair], val: &[WindowPair], seed: u64) -> Result<Backbone> {
    let model = Backbone::new(cell.model.clone(), seed)?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    Ok(fit(model, train, val, &cfg, |_| {})?.best)
}

/// Runs every cell for every seed. Cells whose model, data and training
/// settings coincide (the nfe axis) share one trained model per seed.
/// Without `timing` the report is a pure function of the spec and data.
pub fn run_sweep(spec: &SweepSpec, datasets: &[Dataset], mut progress: impl FnMut(&SweepRow)) -> Result<Vec<SweepRow>> {
    if datasets.is_empty() {
        return Err(Error::Config("sweep needs at least one dataset".into()));
    }
    if datasets.len() > MAX_DATASETS {
        return Err(Error::Config(format!(
            "at most {MAX_DATASETS} datasets can share the context vocabulary, got {}",
            datasets.len()
        )));
    }
    if spec.axis == SweepAxis::Domain && datasets.len() < 2 {
        return Err(Error::Config("the domain axis needs at least two datasets".into()));
    }
    if spec.seeds.is_empty() || spec.horizons.is_empty() {
        return Err(Error::Config("sweep needs at least one seed and one horizon".into()));
    }
    if spec.horizons.contains(&0) {
        return Err(Error::Config("sweep horizons must be >= 1".into()));
    }
    let max_h = *spec.horizons.iter().max().expect("nonempty");
    spec.train.validate()?;
    let labels = spec.resolved_cells();
    let cells: Vec<Cell> = labels
        .iter()
        .map(|l| resolve_cell(spec, max_h, l))
        .collect::<Result<_>>()?;

    let mut prepared: HashMap<String, Vec<Prepared>> = HashMap::new();
    let mut trained: HashMap<String, Backbone> = HashMap::new();
    let mut rows = Vec::new();
    for (label, cell) in labels.iter().zip(&cells) {
        let data_key = format!("{:?}", cell.data);
        if !prepared.contains_key(&data_key) {
            prepared.insert(data_key.clone(), prepare_all(datasets, &cell.data)?);
        }
        let parts = &prepared[&data_key];
        for &seed in &spec.seeds {
            for (di, ds) in datasets.iter().enumerate() {
                let train_key = if cell.pooled {
                    format!("{:?}|{data_key}|pooled|{seed}", cell.model)
                } else {
                    format!("{:?}|{data_key}|{di}|{seed}", cell.model)
                };
                if !trained.contains_key(&train_key) {
                    let model = if cell.pooled {
                        let train = pool_round_robin(parts.iter().map(|p| p.train.clone()).collect());
                        let val = pool_round_robin(parts.iter().map(|p| p.val.clone()).collect());
                        train_model(cell, &spec.train, &train, &val, seed)?
                    } else {
                        train_model(cell, &spec.train, &parts[di].train, &parts[di].val, seed)?
                    };
                    trained.insert(train_key.clone(), model);
                }
                let model = &trained[&train_key];
                for &h in &spec.horizons {
                    let fc = ForecastConfig {
                        nfe: cell.nfe,
                        samples: spec.samples,
                        seed,
                        horizon: Some(h),
                    };
                    let start = Instant::now();
                    let s = evaluate(model, &parts[di].test, &fc)?;
                    let row = SweepRow {
                        axis: spec.axis,
                        cell: label.clone(),
                        dataset: ds.name.clone(),
                        horizon: h,
                        seed,
                        mse: s.mse,
                        mae: s.mae,
                        coverage50: s.coverage50,
                        coverage80: s.coverage80,
                        nfe: s.nfe,
                        wallclock_ms: spec.timing.then(|| start.elapsed().as_secs_f64() * 1e3),
                    };
                    progress(&row);
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SplitMode, SynthKind};

    fn tiny(axis: SweepAxis) -> SweepSpec {
        let mut spec = SweepSpec::new(axis);
        spec.model = ModelConfig {
            look_back: 16,
            horizon: 8,
            patch_size: 4,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_denoise_layers: 1,
            ff_mult: 2,
            ..ModelConfig::default()
        };
        spec.data = DataConfig {
            look_back: 16,
            horizon: 8,
            stride: 16,
            eval_stride: 8,
            split: SplitMode::Ratio {
                train: 0.6,
                val: 0.2,
                test: 0.2,
            },
            n_bins: 4,
            ..DataConfig::default()
        };
        spec.train.epochs = 1;
        spec.horizons = vec![4, 8];
        spec.seeds = vec![0, 1];
        spec.samples = 2;
        spec
    }

    fn series(seed: u64) -> Dataset {
        let mut d = synth_generate(SynthKind::Sine, 240, 0.1, seed).unwrap();
        d.name = format!("sine{seed}");
        d
    }

    #[test]
    fn axis_names_round_trip() {
        for a in SweepAxis::ALL {
            assert_eq!(a.to_string().parse::<SweepAxis>().unwrap(), a);
        }
        assert!("learning_rate".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn nfe_sweep_shape_and_determinism() {
        let spec = tiny(SweepAxis::Nfe);
        let rows = run_sweep(&spec, &[series(0)], |_| {}).unwrap();
        assert_eq!(rows.len(), 3 * 2 * 2);
        let nfes: Vec<usize> = rows.iter().map(|r| r.nfe).collect();
        assert_eq!(&nfes[..4], &[1, 1, 1, 1]);
        assert_eq!(&nfes[8..], &[3, 3, 3, 3]);
        assert!(rows.iter().all(|r| r.wallclock_ms.is_none() && r.coverage50.is_none()));
        let again = run_sweep(&spec, &[series(0)], |_| {}).unwrap();
        assert_eq!(sweep_csv(&rows), sweep_csv(&again));
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with(SWEEP_HEADER));
        assert_eq!(csv.lines().count(), 13);
    }

    #[test]
    fn repeated_cells_reuse_one_model() {
        let mut spec = tiny(SweepAxis::Nfe);
        spec.cells = vec!["1".into(), "1".into()];
        spec.seeds = vec![3];
        let rows = run_sweep(&spec, &[series(0)], |_| {}).unwrap();
        assert_eq!(rows[0].mse, rows[2].mse);
        assert_eq!(rows[1].mse, rows[3].mse);
    }

    #[test]
    fn ablation_cells_change_the_model() {
        let mut spec = tiny(SweepAxis::Ablation);
        spec.cells.extend(SweepAxis::Ablation.default_cells());
        spec.cells.push("no_text".into());
        spec.seeds = vec![0];
        spec.horizons = vec![8];
        let rows = run_sweep(&spec, &[series(0)], |_| {}).unwrap();
        assert_eq!(rows.len(), 5);
        let mses: Vec<f64> = rows.iter().map(|r| r.mse).collect();
        for i in 0..mses.len() {
            for j in i + 1..mses.len() {
                assert_ne!(mses[i], mses[j], "cells {i} and {j}");
            }
        }
    }

    #[test]
    fn domain_axis_pools_datasets() {
        let mut spec = tiny(SweepAxis::Domain);
        spec.seeds = vec![0];
        spec.horizons = vec![8];
        assert!(run_sweep(&spec, &[series(0)], |_| {}).is_err());
        let rows = run_sweep(&spec, &[series(0), series(1)], |_| {}).unwrap();
        assert_eq!(rows.len(), 2 * 2);
        assert_eq!(rows[0].dataset, "sine0");
        assert_eq!(rows[3].dataset, "sine1");
        assert_ne!(rows[0].mse, rows[2].mse);
    }

    #[test]
    fn patch_cells_trim_the_look_back() {
        let spec = tiny(SweepAxis::PatchSize);
        let c = resolve_cell(&spec, 8, "6").unwrap();
        assert_eq!((c.model.look_back, c.data.look_back), (12, 12));
        assert_eq!(c.model.pad(), 4);
        assert!(resolve_cell(&spec, 8, "0").is_err());
        assert!(resolve_cell(&spec, 8, "32").is_err());
    }

    #[test]
    fn bad_cells_and_specs_fail() {
        let spec = tiny(SweepAxis::Head);
        assert!(resolve_cell(&spec, 8, "regression").is_err());
        assert!(resolve_cell(&tiny(SweepAxis::Ablation), 8, "no_attention").is_err());
        assert!(resolve_cell(&tiny(SweepAxis::Scheduler), 8, "quadratic").is_err());
        let mut empty = tiny(SweepAxis::Nfe);
        empty.seeds.clear();
        assert!(run_sweep(&empty, &[series(0)], |_| {}).is_err());
        assert!(run_sweep(&tiny(SweepAxis::Nfe), &[], |_| {}).is_err());
    }

    #[test]
    fn timing_fills_wallclock() {
        let mut spec = tiny(SweepAxis::Head);
        spec.cells = vec!["diffusion".into()];
        spec.seeds = vec![0];
        spec.horizons = vec![8];
        spec.timing = true;
        let rows = run_sweep(&spec, &[series(0)], |_| {}).unwrap();
        assert_eq!(rows[0].nfe, 50);
        assert!(rows[0].wallclock_ms.unwrap() >= 0.0);
    }
}
