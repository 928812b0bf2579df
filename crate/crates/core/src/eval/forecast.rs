use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, Bound, Stream};
use crate::data::WindowPair;
use crate::error::{Error, Result};
use crate::flow::{function_evaluations, multi_step_sample, one_step_sample, DiffusionSchedule, HeadKind};
use crate::tensor::{Tape, Tensor, Var};

/// Sampling settings for [`forecast`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForecastConfig {
    /// Sampler steps per patch; the diffusion head always runs its full chain.
    pub nfe: usize,
    /// Trajectories per window.
    pub samples: usize,
    pub seed: u64,
    /// Steps to generate; `None` uses the model horizon.
    pub horizon: Option<usize>,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            nfe: 1,
            samples: 1,
            seed: 0,
            horizon: None,
        }
    }
}

/// Sampled trajectories for one window, denormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult {
    /// `S x H` trajectories.
    pub trajectories: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub q10: Vec<f64>,
    pub q25: Vec<f64>,
    pub q75: Vec<f64>,
    pub q90: Vec<f64>,
    /// Network evaluations of the velocity head per patch.
    pub nfe: usize,
    pub seed: u64,
}

impl ForecastResult {
    pub fn from_trajectories(trajectories: Vec<Vec<f64>>, nfe: usize, seed: u64) -> Result<Self> {
        let s = trajectories.len();
        if s == 0 {
            return Err(Error::InvalidArgument("forecast needs at least one trajectory".into()));
        }
        let h = trajectories[0].len();
        if trajectories.iter().any(|t| t.len() != h) {
            return Err(Error::InvalidArgument("trajectories differ in length".into()));
        }
        let mut mean = vec![0.0; h];
        let (mut q10, mut q25, mut q75, mut q90) = (vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h]);
        let mut column = vec![0.0; s];
        for j in 0..h {
            for (c, t) in column.iter_mut().zip(&trajectories) {
                *c = t[j];
            }
            mean[j] = column.iter().sum::<f64>() / s as f64;
            column.sort_by(f64::total_cmp);
            q10[j] = quantile_sorted(&column, 0.10);
            q25[j] = quantile_sorted(&column, 0.25);
            q75[j] = quantile_sorted(&column, 0.75);
            q90[j] = quantile_sorted(&column, 0.90);
        }
        Ok(Self {
            trajectories,
            mean,
            q10,
            q25,
            q75,
            q90,
            nfe,
            seed,
        })
    }

    pub fn samples(&self) -> usize {
        self.trajectories.len()
    }

    pub fn horizon(&self) -> usize {
        self.mean.len()
    }
}

/// Linearly interpolated quantile of ascending data (position `q (n - 1)`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let w = pos - lo as f64;
    if w == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + w * (sorted[hi] - sorted[lo])
    }
}

/// Random stream for one trajectory of one window.
pub fn trajectory_rng(seed: u64, window: usize, trajectory: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((window as u64) << 32) | trajectory as u64);
    rng
}

fn patch_rows(values: &[f64], p: usize) -> Tensor {
    let n = values.len().div_ceil(p);
    let mut data = values.to_vec();
    data.resize(n * p, 0.0);
    Tensor::matrix(n, p, data).expect("whole patches")
}

struct Prefix<'p> {
    tape: Tape<'p>,
    b: Bound,
    enc: Var,
}

/// Generates `cfg.samples` trajectories for `window`. Patches are produced
/// left to right; each generated patch is embedded and appended to the
/// decoder input before the next one is drawn.
pub fn forecast(model: &Backbone, window: &WindowPair, window_index: usize, cfg: &ForecastConfig) -> Result<ForecastResult> {
    let mc = model.config();
    let horizon = cfg.horizon.unwrap_or(mc.horizon);
    if horizon == 0 || horizon > mc.horizon {
        return Err(Error::InvalidArgument(format!(
            "forecast horizon {horizon} must lie in 1..={}",
            mc.horizon
        )));
    }
    if cfg.samples == 0 || cfg.nfe == 0 {
        return Err(Error::InvalidArgument("samples and nfe must be >= 1".into()));
    }
    if !model.params().is_finite() {
        return Err(Error::NonFinite("model parameters contain NaN or infinity".into()));
    }
    let p = mc.patch_size;
    let n = horizon.div_ceil(p);
    let diffusion = DiffusionSchedule::cosine(DiffusionSchedule::DEFAULT_STEPS);

    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let h = model.embed_patches(&mut tape, &b, &window.x_hist, Stream::History)?;
    let enc = model.encode(&mut tape, &b, &window.context, h)?;
    let mut prefix = Prefix { tape, b, enc };

    // Without an autoregressive decoder every trajectory shares one decoder pass.
    let parallel = match model.learned_queries(&prefix.b) {
        Some(q) => {
            let q = if n < mc.n_pred_patches() { prefix.tape.slice(q, 0, 0, n)? } else { q };
            let z = model.decode(&mut prefix.tape, &prefix.b, q, prefix.enc)?;
            Some(prefix.tape.value(z).clone())
        }
        None => None,
    };

    let mut trajectories = Vec::with_capacity(cfg.samples);
    for s in 0..cfg.samples {
        let mut rng = trajectory_rng(cfg.seed, window_index, s);
        let mut generated: Vec<f64> = Vec::with_capacity(n * p);
        for j in 0..n {
            let cond = match &parallel {
                Some(z) => z.slice_rows(0, j + 1)?,
                None => decode_prefix(model, &mut prefix, &generated, j)?,
            };
            let patch = if mc.head == HeadKind::Regression {
                regress_last(model, &cond)?
            } else {
                let field = model.velocity_field(cond, j);
                if mc.head == HeadKind::MeanVelocity && cfg.nfe == 1 {
                    one_step_sample(&field, mc.head, &[1, p], &mut rng)?
                } else {
                    multi_step_sample(&field, mc.head, cfg.nfe, &[1, p], &diffusion, &mut rng)?
                }
            };
            if !patch.is_finite() {
                return Err(Error::NonFinite(format!("patch {j} of trajectory {s} is not finite")));
            }
            generated.extend_from_slice(patch.data());
        }
        generated.truncate(horizon);
        trajectories.push(window.denormalize(&generated));
    }
    let nfe = function_evaluations(mc.head, cfg.nfe, &diffusion);
    ForecastResult::from_trajectories(trajectories, nfe, cfg.seed)
}

/// Decoder states for `[BOS; generated patches]`, `j + 1` rows.
fn decode_prefix(model: &Backbone, prefix: &mut Prefix<'_>, generated: &[f64], j: usize) -> Result<Tensor> {
    let mark = prefix.tape.len();
    let bos = prefix.b[model.bos_index().expect("autoregressive model has BOS")];
    let dec_in = if j == 0 {
        bos
    } else {
        let emb = model.embed_target_patches(&mut prefix.tape, &prefix.b, &patch_rows(generated, model.config().patch_size).into_data(), 0)?;
        prefix.tape.concat(&[bos, emb], 0)?
    };
    let z = model.decode(&mut prefix.tape, &prefix.b, dec_in, prefix.enc)?;
    let out = prefix.tape.value(z).clone();
    prefix.tape.truncate(mark);
    Ok(out)
}

fn regress_last(model: &Backbone, cond: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let rows = cond.shape()[0];
    let z = tape.constant(cond.slice_rows(rows - 1, rows)?);
    let y = model.regress(&mut tape, &b, z)?;
    Ok(tape.value(y).clone())
}

/// Repeats the last observed value.
pub fn persistence(window: &WindowPair, horizon: usize) -> Vec<f64> {
    let last = *window.raw_history().last().expect("non-empty look-back");
    vec![last; horizon]
}

/// Repeats the look-back mean.
pub fn mean_baseline(window: &WindowPair, horizon: usize) -> Vec<f64> {
    vec![window.mean; horizon]
}
