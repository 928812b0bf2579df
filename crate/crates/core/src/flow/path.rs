//! Probability path, velocity targets, and the interval-corrected loss.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flow::{DiffusionSchedule, HeadKind, ScheduleKind, VelocityField};
use crate::tensor::{Tape, Tensor, Var};

/// Default finite-difference step for the time partial.
pub const DEFAULT_TIME_STEP: f64 = 1e-3;

/// How the derivative of u inside the corrected target is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeDerivative {
    /// du/dt with the noisy input held fixed.
    #[default]
    Partial,
    /// du/dt along the conditional path: the input moves with velocity v.
    Total,
}

impl std::fmt::Display for TimeDerivative {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TimeDerivative::Partial => "partial",
            TimeDerivative::Total => "total",
        })
    }
}

impl std::str::FromStr for TimeDerivative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partial" => Ok(TimeDerivative::Partial),
            "total" => Ok(TimeDerivative::Total),
            other => Err(Error::Config(format!(
                "unknown time derivative '{other}' (partial|total)"
            ))),
        }
    }
}

/// Sign of the interval correction in the mean-velocity target.
///
/// `Minus` is `v - (r - t) du/dt`. `Plus` is `v + (r - t) du/dt`, which is the
/// identity obeyed by the true average velocity when time runs forward from
/// noise (t = 0) to data (t = 1) with t <= r.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrectionSign {
    #[default]
    Minus,
    Plus,
}

impl std::fmt::Display for CorrectionSign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorrectionSign::Minus => "minus",
            CorrectionSign::Plus => "plus",
        })
    }
}

impl std::str::FromStr for CorrectionSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minus" => Ok(CorrectionSign::Minus),
            "plus" => Ok(CorrectionSign::Plus),
            other => Err(Error::Config(format!(
                "unknown correction sign '{other}' (minus|plus)"
            ))),
        }
    }
}

/// One training draw.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub y: Tensor,
    pub noise: Tensor,
    pub t: f64,
    pub r: f64,
    pub noisy: Tensor,
    pub velocity: Tensor,
}

impl FlowSample {
    /// Draws (t, r) and noise for clean patches `y` and builds the path point.
    pub fn draw<R: Rng + ?Sized>(
        y: Tensor,
        schedule: ScheduleKind,
        p_eq: f64,
        rng: &mut R,
    ) -> Self {
        let (t, r) = sample_times(rng, p_eq);
        let noise = gaussian_like(y.shape(), rng);
        let noisy = interpolate(&y, &noise, t, schedule);
        let velocity = base_velocity(&y, &noise, t, schedule);
        Self {
            y,
            noise,
            t,
            r,
            noisy,
            velocity,
        }
    }
}

/// Standard normal tensor of the given shape.
pub fn gaussian_like<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// t ~ U[0,1], r ~ U[t,1]; with probability `p_eq` r is set to t.
pub fn sample_times<R: Rng + ?Sized>(rng: &mut R, p_eq: f64) -> (f64, f64) {
    let t: f64 = rng.gen();
    let u: f64 = rng.gen();
    let collapse = p_eq > 0.0 && rng.gen::<f64>() < p_eq;
    if collapse {
        (t, t)
    } else {
        (t, (t + (1.0 - t) * u).min(1.0))
    }
}

/// (1 - alpha(t)) * noise + alpha(t) * y.
pub fn interpolate(y: &Tensor, noise: &Tensor, t: f64, schedule: ScheduleKind) -> Tensor {
    assert_eq!(y.shape(), noise.shape(), "interpolate: shape mismatch");
    let a = schedule.alpha(t);
    let data = if a == 0.0 {
        noise.data().to_vec()
    } else if a == 1.0 {
        y.data().to_vec()
    } else {
        y.data()
            .iter()
            .zip(noise.data())
            .map(|(yv, e)| (1.0 - a) * e + a * yv)
            .collect()
    };
    Tensor::new(y.shape().to_vec(), data).expect("same shape")
}

/// alpha'(t) * (y - noise).
pub fn base_velocity(y: &Tensor, noise: &Tensor, t: f64, schedule: ScheduleKind) -> Tensor {
    assert_eq!(y.shape(), noise.shape(), "base_velocity: shape mismatch");
    let d = schedule.alpha_prime(t);
    let data = y
        .data()
        .iter()
        .zip(noise.data())
        .map(|(yv, e)| if d == 1.0 { yv - e } else { d * (yv - e) })
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("same shape")
}

/// v - (r - t) * du_dt.
pub fn meanflow_target(v: &Tensor, du_dt: &Tensor, t: f64, r: f64) -> Result<Tensor> {
    if v.shape() != du_dt.shape() {
        return Err(Error::shape("meanflow_target", v.shape(), du_dt.shape()));
    }
    let span = r - t;
    if span == 0.0 {
        return Ok(v.clone());
    }
    let data = v
        .data()
        .iter()
        .zip(du_dt.data())
        .map(|(a, d)| a - span * d)
        .collect();
    Tensor::new(v.shape().to_vec(), data)
}

/// [`meanflow_target`] with a selectable correction sign.
pub fn corrected_target(v: &Tensor, du_dt: &Tensor, t: f64, r: f64, sign: CorrectionSign) -> Result<Tensor> {
    match sign {
        CorrectionSign::Minus => meanflow_target(v, du_dt, t, r),
        CorrectionSign::Plus => {
            let flipped = Tensor::new(du_dt.shape().to_vec(), du_dt.data().iter().map(|d| -d).collect())?;
            meanflow_target(v, &flipped, t, r)
        }
    }
}

fn axpy(x: &Tensor, dir: Option<&Tensor>, h: f64) -> Tensor {
    match dir {
        None => x.clone(),
        Some(d) => {
            let data = x.data().iter().zip(d.data()).map(|(a, b)| a + h * b).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        }
    }
}

fn difference(field: &dyn VelocityField, x: &Tensor, dir: Option<&Tensor>, t: f64, r: f64, h: f64) -> Result<Tensor> {
    if r == t {
        return Ok(Tensor::zeros(x.shape()));
    }
    let (lo_t, hi_t, step) = if t + h <= r {
        (t, t + h, h)
    } else if t - h >= 0.0 {
        (t - h, t, h)
    } else {
        let h = (r - t) / 2.0;
        (t, t + h, h)
    };
    let lo_x = axpy(x, dir, lo_t - t);
    let hi_x = axpy(x, dir, hi_t - t);
    let lo = field.velocity(&lo_x, lo_t, r)?;
    let hi = field.velocity(&hi_x, hi_t, r)?;
    let data = hi
        .data()
        .iter()
        .zip(lo.data())
        .map(|(a, b)| (a - b) / step)
        .collect();
    Tensor::new(hi.shape().to_vec(), data)
}

/// Finite-difference du/dt at fixed input. Forward difference when
/// `t + h <= r`, backward when `t - h >= 0`, otherwise a forward step of
/// `(r - t) / 2`; exactly zero when `r == t`. The result is a plain value and
/// carries no gradient.
pub fn time_partial(field: &dyn VelocityField, x: &Tensor, t: f64, r: f64, h: f64) -> Result<Tensor> {
    difference(field, x, None, t, r, h)
}

/// Finite-difference derivative of u along (dx/dt, dt/dt) = (v, 1), with the
/// same step selection as [`time_partial`].
pub fn total_derivative(
    field: &dyn VelocityField,
    x: &Tensor,
    v: &Tensor,
    t: f64,
    r: f64,
    h: f64,
) -> Result<Tensor> {
    if x.shape() != v.shape() {
        return Err(Error::shape("total_derivative", x.shape(), v.shape()));
    }
    difference(field, x, Some(v), t, r, h)
}

/// Mean of `(u - target)^2` over elements where `mask` is 1. `target` and
/// `mask` enter the tape as constants.
pub fn flow_loss(tape: &mut Tape<'_>, u: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    let shape = tape.shape(u).to_vec();
    if target.shape() != shape.as_slice() {
        return Err(Error::shape("flow_loss", &shape, target.shape()));
    }
    if mask.shape() != shape.as_slice() {
        return Err(Error::shape("flow_loss", &shape, mask.shape()));
    }
    let count = mask.data().iter().filter(|m| **m != 0.0).count();
    if count == 0 {
        return Err(Error::InvalidArgument("flow_loss: every element is masked".into()));
    }
    let tv = tape.constant(target.clone());
    let mv = tape.constant(mask.clone());
    let diff = tape.sub(u, tv)?;
    let sq = tape.square(diff);
    let kept = tape.mul(sq, mv)?;
    let total = tape.sum(kept);
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Training input and target for the comparison heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AltTarget {
    pub input: Tensor,
    pub target: Tensor,
    /// Time fed to the network.
    pub t: f64,
}

/// vanilla_fm: target alpha'(t)(y - noise) at the path point for time `t`.
/// diffusion: `t` selects the step `floor(t * K)`; input is the DDPM-noised
/// value and the target is the noise itself.
pub fn alt_head_target(
    head: HeadKind,
    y: &Tensor,
    noise: &Tensor,
    t: f64,
    schedule: ScheduleKind,
    diffusion: &DiffusionSchedule,
) -> Result<AltTarget> {
    match head {
        HeadKind::VanillaFm => Ok(AltTarget {
            input: interpolate(y, noise, t, schedule),
            target: base_velocity(y, noise, t, schedule),
            t,
        }),
        HeadKind::Diffusion => {
            let k = ((t * diffusion.steps() as f64) as usize).min(diffusion.steps() - 1);
            Ok(AltTarget {
                input: diffusion.noise(y, noise, k),
                target: noise.clone(),
                t: diffusion.time_of(k),
            })
        }
        other => Err(Error::InvalidArgument(format!(
            "alt_head_target: head '{other}' has no alternative target"
        ))),
    }
}
