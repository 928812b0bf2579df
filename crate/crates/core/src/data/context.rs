use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Dataset-id slots reserved at the start of the vocabulary.
pub const MAX_DATASETS: usize = 8;
/// Quantile bins per statistic.
pub const DEFAULT_BINS: usize = 16;
/// Trend classes: falling, flat, rising.
pub const TREND_CLASSES: usize = 3;

/// Which context tokens accompany each window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContextMode {
    /// Dataset id, four statistic bins, trend.
    #[default]
    Full,
    /// Drops the dataset id.
    NoDomain,
    /// Keeps only the dataset id.
    NoStatistics,
    /// No context tokens.
    NoText,
}

impl ContextMode {
    pub fn n_tokens(self) -> usize {
        match self {
            ContextMode::Full => 6,
            ContextMode::NoDomain => 5,
            ContextMode::NoStatistics => 1,
            ContextMode::NoText => 0,
        }
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextMode::Full => "full",
            ContextMode::NoDomain => "no_domain",
            ContextMode::NoStatistics => "no_statistics",
            ContextMode::NoText => "no_text",
        })
    }
}

impl FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ContextMode::Full),
            "no_domain" => Ok(ContextMode::NoDomain),
            "no_statistics" => Ok(ContextMode::NoStatistics),
            "no_text" => Ok(ContextMode::NoText),
            _ => Err(Error::Config(format!(
                "unknown context mode '{s}' (full, no_domain, no_statistics, no_text)"
            ))),
        }
    }
}

/// Equal-probability bin edges for mean, std, min and max of a look-back.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBins {
    n_bins: usize,
    edges: [Vec<f64>; 4],
}

fn stats(window: &[f64]) -> [f64; 4] {
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let min = window.iter().copied().fold(f64::INFINITY, f64::min);
    let max = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [mean, var.sqrt(), min, max]
}

impl ContextBins {
    /// Fits `n_bins - 1` interior quantile edges per statistic.
    pub fn fit<'a>(windows: impl IntoIterator<Item = &'a [f64]>, n_bins: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::Config("context bins must be >= 1".into()));
        }
        let mut cols: [Vec<f64>; 4] = Default::default();
        for w in windows {
            if w.is_empty() {
                continue;
            }
            for (c, s) in cols.iter_mut().zip(stats(w)) {
                c.push(s);
            }
        }
        if cols[0].is_empty() {
            return Err(Error::Data("cannot fit context bins without windows".into()));
        }
        let edges = cols.map(|mut c| {
            c.sort_by(f64::total_cmp);
            (1..n_bins)
                .map(|k| c[(k * c.len() / n_bins).min(c.len() - 1)])
                .collect()
        });
        Ok(Self { n_bins, edges })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Interior edges for mean, std, min and max, in that order.
    pub fn edges(&self) -> &[Vec<f64>; 4] {
        &self.edges
    }

    /// Rebuilds bins from stored edges; each list must hold `n_bins - 1`
    /// non-decreasing values.
    pub fn from_edges(n_bins: usize, edges: [Vec<f64>; 4]) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::Config("context bins must be >= 1".into()));
        }
        for e in &edges {
            if e.len() + 1 != n_bins || e.windows(2).any(|w| w[0] > w[1]) || e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "context bin edges must be {} sorted finite values",
                    n_bins - 1
                )));
            }
        }
        Ok(Self { n_bins, edges })
    }

    /// One line: `n_bins;mean edges;std edges;min edges;max edges`, edges
    /// comma separated in round-trip float form.
    pub fn to_text(&self) -> String {
        let mut parts = vec![self.n_bins.to_string()];
        for e in &self.edges {
            parts.push(e.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
        }
        parts.join(";")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = || Error::Data(format!("malformed context bins '{text}'"));
        let parts: Vec<&str> = text.split(';').collect();
        if parts.len() != 5 {
            return Err(bad());
        }
        let n_bins: usize = parts[0].parse().map_err(|_| bad())?;
        let mut edges: [Vec<f64>; 4] = Default::default();
        for (slot, part) in edges.iter_mut().zip(&parts[1..]) {
            if !part.is_empty() {
                *slot = part
                    .split(',')
                    .map(|v| v.parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
            }
        }
        Self::from_edges(n_bins, edges)
    }

    /// Vocabulary size needed by these bins.
    pub fn vocab(&self) -> usize {
        MAX_DATASETS + 4 * self.n_bins + TREND_CLASSES
    }

    fn bin(&self, stat: usize, value: f64) -> usize {
        self.edges[stat].partition_point(|e| *e <= value)
    }
}

/// Token ids for one raw look-back. Ids occupy disjoint ranges:
/// dataset, then mean, std, min and max bins, then trend.
pub fn build_context_tokens(
    bins: Option<&ContextBins>,
    raw_look_back: &[f64],
    dataset_id: usize,
    mode: ContextMode,
) -> Result<Vec<usize>> {
    if mode == ContextMode::NoText {
        return Ok(Vec::new());
    }
    if dataset_id >= MAX_DATASETS {
        return Err(Error::InvalidArgument(format!(
            "dataset id {dataset_id} exceeds the {MAX_DATASETS} reserved slots"
        )));
    }
    if mode == ContextMode::NoStatistics {
        return Ok(vec![dataset_id]);
    }
    let bins = bins.ok_or_else(|| Error::InvalidArgument("context bins have not been fitted".into()))?;
    if raw_look_back.is_empty() {
        return Err(Error::InvalidArgument("empty look-back".into()));
    }
    let s = stats(raw_look_back);
    let mut tokens = Vec::with_capacity(6);
    if mode == ContextMode::Full {
        tokens.push(dataset_id);
    }
    for (k, v) in s.iter().enumerate() {
        tokens.push(MAX_DATASETS + k * bins.n_bins + bins.bin(k, *v));
    }
    let delta = raw_look_back[raw_look_back.len() - 1] - raw_look_back[0];
    let trend = match delta.partial_cmp(&0.0) {
        Some(std::cmp::Ordering::Less) => 0,
        Some(std::cmp::Ordering::Greater) => 2,
        _ => 1,
    };
    tokens.push(MAX_DATASETS + 4 * bins.n_bins + trend);
    Ok(tokens)
}
