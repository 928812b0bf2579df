use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Synthetic series families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// `sin(2 pi i / 24)` plus noise.
    Sine,
    /// `x_i = 0.9 x_{i-1} + noise`.
    Ar1,
    /// `0.01 i + sin(2 pi i / 24)` plus noise.
    TrendSine,
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Sine => "sine",
            SynthKind::Ar1 => "ar1",
            SynthKind::TrendSine => "trend_sine",
        })
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(SynthKind::Sine),
            "ar1" => Ok(SynthKind::Ar1),
            "trend_sine" => Ok(SynthKind::TrendSine),
            _ => Err(Error::Config(format!("unknown synthetic kind '{s}' (sine, ar1, trend_sine)"))),
        }
    }
}

/// Generates a seeded univariate series of length `n`.
pub fn synth_generate(kind: SynthKind, n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut noise = || noise_std * normal.sample(&mut rng);
    let season = |i: usize| (2.0 * PI * (i % 24) as f64 / 24.0).sin();
    let series: Vec<f64> = match kind {
        SynthKind::Sine => (0..n).map(|i| season(i) + noise()).collect(),
        SynthKind::TrendSine => (0..n).map(|i| 0.01 * i as f64 + season(i) + noise()).collect(),
        SynthKind::Ar1 => {
            let mut x = 0.0;
            (0..n)
                .map(|_| {
                    x = 0.9 * x + noise();
                    x
                })
                .collect()
        }
    };
    let mut ds = Dataset::univariate(format!("synth_{kind}"), series)?;
    ds.frequency = "1".into();
    Ok(ds)
}
