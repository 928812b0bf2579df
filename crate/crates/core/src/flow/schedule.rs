use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Interpolation coefficient family for the noise-to-data path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

impl ScheduleKind {
    /// alpha(t): weight of the data endpoint at time t.
    pub fn alpha(self, t: f64) -> f64 {
        match self {
            ScheduleKind::Linear => t,
            ScheduleKind::Cosine => (1.0 - (PI * t).cos()) / 2.0,
        }
    }

    /// d alpha / dt.
    pub fn alpha_prime(self, t: f64) -> f64 {
        match self {
            ScheduleKind::Linear => 1.0,
            ScheduleKind::Cosine => PI / 2.0 * (PI * t).sin(),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown scheduler '{other}' (linear|cosine)"))),
        }
    }
}

/// What the generative head is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadKind {
    /// Interval-conditioned average velocity u(x, t, r).
    #[default]
    MeanVelocity,
    /// Instantaneous velocity u(x, t).
    VanillaFm,
    /// Epsilon prediction with ancestral DDPM sampling.
    Diffusion,
    /// Direct point regression of patch values; no generative head.
    Regression,
}

impl HeadKind {
    pub fn is_generative(self) -> bool {
        self != HeadKind::Regression
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::MeanVelocity => "mean_velocity",
            HeadKind::VanillaFm => "vanilla_fm",
            HeadKind::Diffusion => "diffusion",
            HeadKind::Regression => "regression",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "mean_velocity" => Ok(HeadKind::MeanVelocity),
            "vanilla_fm" => Ok(HeadKind::VanillaFm),
            "diffusion" => Ok(HeadKind::Diffusion),
            "regression" => Ok(HeadKind::Regression),
            other => Err(Error::Config(format!(
                "unknown head '{other}' (mean_velocity|vanilla_fm|diffusion|regression)"
            ))),
        }
    }
}
