//! INI-style run configuration with dotted command-line overrides.

use std::collections::{BTreeMap, BTreeSet};

use crate::backbone::ModelConfig;
use crate::data::{ContextMode, DataConfig};
use crate::error::{Error, Result};
use crate::eval::{SweepAxis, SweepSpec};
use crate::train::TrainConfig;

pub const SECTIONS: &[&str] = &["model", "train", "data", "eval", "sweep"];

const TRAIN_KEYS: &[&str] = &[
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "p_eq",
    "h_t",
    "clip_norm",
    "time_derivative",
    "correction",
    "eval_seed",
];
const DATA_KEYS: &[&str] = &["stride", "eval_stride", "split", "context", "n_bins"];
const EVAL_KEYS: &[&str] = &["nfe", "samples", "seed", "horizons"];
const SWEEP_KEYS: &[&str] = &["axis", "cells", "seeds", "timing"];

/// Evaluation settings shared by `forecast`, `eval` and `sweep`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub nfe: usize,
    pub samples: usize,
    pub seed: u64,
    pub horizons: Vec<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            nfe: 1,
            samples: 100,
            seed: 0,
            horizons: vec![12, 24, 36, 48],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub axis: Option<SweepAxis>,
    pub cells: Vec<String>,
    pub seeds: Vec<u64>,
    pub timing: bool,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            axis: None,
            cells: Vec::new(),
            seeds: vec![0],
            timing: false,
        }
    }
}

/// Every setting a subcommand can read, plus the keys that were given
/// explicitly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalSettings,
    pub sweep: SweepSettings,
    explicit: BTreeSet<String>,
}

fn known_keys(section: &str) -> &'static [&'static str] {
    match section {
        "model" => ModelConfig::KEYS,
        "train" => TRAIN_KEYS,
        "data" => DATA_KEYS,
        "eval" => EVAL_KEYS,
        "sweep" => SWEEP_KEYS,
        _ => &[],
    }
}

/// All `section.key` names.
pub fn all_keys() -> Vec<String> {
    SECTIONS
        .iter()
        .flat_map(|s| known_keys(s).iter().map(move |k| format!("{s}.{k}")))
        .collect()
}

fn suggest(name: &str) -> String {
    all_keys()
        .into_iter()
        .map(|k| (strsim::jaro_winkler(name, &k), k))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| format!("; did you mean '{k}'?"))
        .unwrap_or_default()
}

fn parse<T: std::str::FromStr>(name: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{name}: cannot parse '{value}'")))
}

fn list<T: std::str::FromStr>(name: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(name, v))
        .collect()
}

impl RunConfig {
    /// Parses `[section]` headers and `key = value` lines; `#` and `;` start
    /// comments.
    pub fn from_ini(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_ini(text)?;
        Ok(cfg)
    }

    pub fn apply_ini(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{name}] (expected one of {})",
                        n + 1,
                        SECTIONS.join(", ")
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
            let key = key.trim();
            let full = match &section {
                Some(s) if !key.contains('.') => format!("{s}.{key}"),
                _ => key.to_string(),
            };
            self.set(&full, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    /// Applies one `section.key=value` setting.
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let (section, key) = name
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("setting '{name}' needs a section prefix{}", suggest(name))))?;
        if !known_keys(section).contains(&key) {
            return Err(Error::Config(format!("unknown setting '{name}'{}", suggest(name))));
        }
        match section {
            "model" => self.model.set(key, value)?,
            "train" => {
                let t = &mut self.train;
                match key {
                    "lr" => t.lr = parse(name, value)?,
                    "batch_size" => t.batch_size = parse(name, value)?,
                    "epochs" => t.epochs = parse(name, value)?,
                    "seed" => t.seed = parse(name, value)?,
                    "p_eq" => t.p_eq = parse(name, value)?,
                    "h_t" => t.h_t = parse(name, value)?,
                    "clip_norm" => t.clip_norm = parse(name, value)?,
                    "time_derivative" => t.time_derivative = value.trim().parse()?,
                    "correction" => t.correction = value.trim().parse()?,
                    "eval_seed" => t.eval_seed = parse(name, value)?,
                    _ => unreachable!("checked against TRAIN_KEYS"),
                }
            }
            "data" => {
                let d = &mut self.data;
                match key {
                    "stride" => d.stride = parse(name, value)?,
                    "eval_stride" => d.eval_stride = parse(name, value)?,
                    "split" => d.split = value.trim().parse()?,
                    "context" => d.context = value.trim().parse()?,
                    "n_bins" => d.n_bins = parse(name, value)?,
                    _ => unreachable!("checked against DATA_KEYS"),
                }
            }
            "eval" => {
                let e = &mut self.eval;
                match key {
                    "nfe" => e.nfe = parse(name, value)?,
                    "samples" => e.samples = parse(name, value)?,
                    "seed" => e.seed = parse(name, value)?,
                    "horizons" => e.horizons = list(name, value)?,
                    _ => unreachable!("checked against EVAL_KEYS"),
                }
            }
            "sweep" => {
                let s = &mut self.sweep;
                match key {
                    "axis" => s.axis = Some(value.trim().parse()?),
                    "cells" => s.cells = list(name, value)?,
                    "seeds" => s.seeds = list(name, value)?,
                    "timing" => s.timing = parse(name, value)?,
                    _ => unreachable!("checked against SWEEP_KEYS"),
                }
            }
            _ => unreachable!("sections are fixed"),
        }
        self.explicit.insert(name.to_string());
        Ok(())
    }

    pub fn is_explicit(&self, name: &str) -> bool {
        self.explicit.contains(name)
    }

    /// Sets the base seed for training, model init and evaluation, unless a
    /// subsystem seed was given explicitly.
    pub fn set_base_seed(&mut self, seed: u64) {
        if !self.is_explicit("train.seed") {
            self.train.seed = seed;
        }
        if !self.is_explicit("eval.seed") {
            self.eval.seed = seed;
        }
    }

    /// Derives linked settings and checks the whole configuration.
    pub fn resolve(&mut self) -> Result<()> {
        let tokens = self.data.context.n_tokens();
        if self.is_explicit("model.n_context_tokens") && self.model.n_context_tokens != tokens {
            return Err(Error::Config(format!(
                "model.n_context_tokens={} contradicts data.context={} ({} tokens)",
                self.model.n_context_tokens, self.data.context, tokens
            )));
        }
        self.model.n_context_tokens = tokens;
        if matches!(self.data.context, ContextMode::Full | ContextMode::NoDomain) {
            let vocab = crate::data::MAX_DATASETS + 4 * self.data.n_bins + crate::data::TREND_CLASSES;
            if !self.is_explicit("model.context_vocab") {
                self.model.context_vocab = vocab;
            } else if self.model.context_vocab < vocab {
                return Err(Error::Config(format!(
                    "model.context_vocab={} is smaller than the {vocab} ids data.n_bins={} needs",
                    self.model.context_vocab, self.data.n_bins
                )));
            }
        }
        self.data.look_back = self.model.look_back;
        self.data.horizon = self.model.horizon;
        self.model.validate()?;
        self.train.validate()?;
        if self.data.stride == 0 || self.data.eval_stride == 0 || self.data.n_bins == 0 {
            return Err(Error::Config("data.stride, data.eval_stride and data.n_bins must be >= 1".into()));
        }
        if self.eval.nfe == 0 || self.eval.samples == 0 {
            return Err(Error::Config("eval.nfe and eval.samples must be >= 1".into()));
        }
        if self.eval.horizons.is_empty() || self.eval.horizons.contains(&0) {
            return Err(Error::Config("eval.horizons must list positive horizons".into()));
        }
        Ok(())
    }

    /// Every resolved value as `section.key -> value`.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        for (k, v) in self.model.to_kv() {
            m.insert(format!("model.{k}"), v);
        }
        let t = &self.train;
        let join = |v: &[String]| v.join(",");
        let pairs = [
            ("train.lr", format!("{:?}", t.lr)),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.p_eq", format!("{:?}", t.p_eq)),
            ("train.h_t", format!("{:?}", t.h_t)),
            ("train.clip_norm", format!("{:?}", t.clip_norm)),
            ("train.time_derivative", t.time_derivative.to_string()),
            ("train.correction", t.correction.to_string()),
            ("train.eval_seed", t.eval_seed.to_string()),
            ("data.stride", self.data.stride.to_string()),
            ("data.eval_stride", self.data.eval_stride.to_string()),
            ("data.split", self.data.split.to_string()),
            ("data.context", self.data.context.to_string()),
            ("data.n_bins", self.data.n_bins.to_string()),
            ("eval.nfe", self.eval.nfe.to_string()),
            ("eval.samples", self.eval.samples.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
            (
                "eval.horizons",
                join(&self.eval.horizons.iter().map(|h| h.to_string()).collect::<Vec<_>>()),
            ),
            (
                "sweep.axis",
                self.sweep.axis.map(|a| a.to_string()).unwrap_or_default(),
            ),
            ("sweep.cells", join(&self.sweep.cells)),
            (
                "sweep.seeds",
                join(&self.sweep.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>()),
            ),
            ("sweep.timing", self.sweep.timing.to_string()),
        ];
        for (k, v) in pairs {
            m.insert(k.to_string(), v);
        }
        m
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        let axis = self
            .sweep
            .axis
            .ok_or_else(|| Error::Config("sweep.axis is required".into()))?;
        let mut spec = SweepSpec::new(axis);
        spec.cells = self.sweep.cells.clone();
        spec.seeds = self.sweep.seeds.clone();
        spec.horizons = self.eval.horizons.clone();
        spec.model = self.model.clone();
        spec.model.horizon = *self.eval.horizons.iter().max().expect("resolved");
        spec.train = self.train.clone();
        spec.data = self.data.clone();
        spec.samples = self.eval.samples;
        spec.nfe = self.eval.nfe;
        spec.timing = self.sweep.timing;
        Ok(spec)
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
