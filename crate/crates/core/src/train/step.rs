use rand::Rng;

use crate::backbone::{Backbone, Bound, ModelConfig, Stream};
use crate::data::WindowPair;
use crate::error::{Error, Result};
use crate::flow::{
    alt_head_target, corrected_target, flow_loss, time_partial, total_derivative, CorrectionSign, DiffusionSchedule, FlowSample,
    HeadKind, TimeDerivative, DEFAULT_TIME_STEP,
};
use crate::tensor::{clip_grad_norm, AdamState, Tape, Tensor, Var};

/// Optimization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Probability of drawing r == t.
    pub p_eq: f64,
    /// Finite-difference step for du/dt.
    pub h_t: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub time_derivative: TimeDerivative,
    pub correction: CorrectionSign,
    /// Seed of the one-trajectory validation forecasts.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 4,
            epochs: 10,
            seed: 0,
            p_eq: 0.0,
            h_t: DEFAULT_TIME_STEP,
            clip_norm: 1.0,
            time_derivative: TimeDerivative::Partial,
            correction: CorrectionSign::Minus,
            eval_seed: 0x5eed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_eq) {
            return Err(Error::Config(format!("train.p_eq must lie in [0, 1], got {}", self.p_eq)));
        }
        if !(self.h_t > 0.0 && self.h_t < 1.0) {
            return Err(Error::Config(format!("train.h_t must lie in (0, 1), got {}", self.h_t)));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!("train.clip_norm must be >= 0, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// Clean target patches (`N x P`, zero-padded) and the matching loss mask.
pub fn patch_targets(window: &WindowPair, cfg: &ModelConfig) -> Result<(Tensor, Tensor)> {
    if window.y_true.len() != cfg.horizon || window.x_hist.len() != cfg.look_back {
        return Err(Error::Data(format!(
            "window has look-back {} and horizon {}, model expects {} and {}",
            window.x_hist.len(),
            window.y_true.len(),
            cfg.look_back,
            cfg.horizon
        )));
    }
    let (n, p) = (cfg.n_pred_patches(), cfg.patch_size);
    let mut y = window.y_true.clone();
    y.resize(n * p, 0.0);
    let mask = (0..n * p).map(|i| if i < cfg.horizon { 1.0 } else { 0.0 }).collect();
    Ok((Tensor::matrix(n, p, y)?, Tensor::matrix(n, p, mask)?))
}

/// Decoder states for a window during training: history and context are
/// encoded, and the decoder reads the shifted clean targets.
pub fn condition(model: &Backbone, tape: &mut Tape<'_>, b: &Bound, window: &WindowPair) -> Result<Var> {
    let h = model.embed_patches(tape, b, &window.x_hist, Stream::History)?;
    let enc = model.encode(tape, b, &window.context, h)?;
    let dec_in = model.decoder_inputs(tape, b, &window.y_true)?;
    model.decode(tape, b, dec_in, enc)
}

/// Everything a head's loss needs besides the network: the input it sees,
/// its times, and the fixed regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTarget {
    pub input: Tensor,
    pub t: f64,
    pub r: f64,
    pub target: Tensor,
    pub mask: Tensor,
}

/// Draws times and noise and builds the head's target. For the mean-velocity
/// head the target is `v -/+ (r - t) du/dt`, with du/dt taken by finite
/// differences of the current network at fixed decoder states `z`.
pub fn draw_target<R: Rng + ?Sized>(
    model: &Backbone,
    z: &Tensor,
    y: Tensor,
    mask: Tensor,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<HeadTarget> {
    let mc = model.config();
    if mc.head == HeadKind::Regression {
        return Ok(HeadTarget {
            input: Tensor::zeros(y.shape()),
            t: 0.0,
            r: 0.0,
            target: y,
            mask,
        });
    }
    let s = FlowSample::draw(y, mc.scheduler, cfg.p_eq, rng);
    match mc.head {
        HeadKind::MeanVelocity => {
            let field = model.velocity_field(z.clone(), 0);
            let du = match cfg.time_derivative {
                TimeDerivative::Partial => time_partial(&field, &s.noisy, s.t, s.r, cfg.h_t)?,
                TimeDerivative::Total => total_derivative(&field, &s.noisy, &s.velocity, s.t, s.r, cfg.h_t)?,
            };
            let target = corrected_target(&s.velocity, &du, s.t, s.r, cfg.correction)?;
            Ok(HeadTarget {
                input: s.noisy,
                t: s.t,
                r: s.r,
                target,
                mask,
            })
        }
        head => {
            let diffusion = DiffusionSchedule::cosine(DiffusionSchedule::DEFAULT_STEPS);
            let alt = alt_head_target(head, &s.y, &s.noise, s.t, mc.scheduler, &diffusion)?;
            Ok(HeadTarget {
                input: alt.input,
                t: alt.t,
                r: alt.t,
                target: alt.target,
                mask,
            })
        }
    }
}

/// Masked squared error of the head output against a fixed target.
pub fn head_loss(model: &Backbone, tape: &mut Tape<'_>, b: &Bound, z: Var, target: &HeadTarget) -> Result<Var> {
    let out = if model.config().head == HeadKind::Regression {
        model.regress(tape, b, z)?
    } else {
        let x = tape.constant(target.input.clone());
        model.denoise_velocity(tape, b, x, target.t, target.r, z, 0)?
    };
    flow_loss(tape, out, &target.target, &target.mask)
}

/// Loss for one window with a fresh draw.
pub fn instance_loss<'p, R: Rng + ?Sized>(
    model: &'p Backbone,
    tape: &mut Tape<'p>,
    b: &Bound,
    window: &WindowPair,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Var> {
    let (y, mask) = patch_targets(window, model.config())?;
    let z = condition(model, tape, b, window)?;
    let target = draw_target(model, tape.value(z), y, mask, cfg, rng)?;
    head_loss(model, tape, b, z, &target)
}

/// Loss and pre-clip gradient norm of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Averages instance losses over `batch`, clips, and applies one Adam update.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Backbone,
    opt: &mut AdamState,
    batch: &[&WindowPair],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("train_step: empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads: Vec<Option<Tensor>> = vec![None; model.params().len()];
    let mut loss = 0.0;
    for w in batch {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, true);
        let l = instance_loss(model, &mut tape, &b, w, cfg, rng)?;
        loss += tape.value(l).data()[0] * scale;
        let mut g = tape.backward(l)?;
        for (i, slot) in grads.iter_mut().enumerate() {
            if let Some(gi) = g.take(b[i]) {
                match slot {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(gi.data())
                        .for_each(|(a, x)| *a += scale * x),
                    None => {
                        let mut gi = gi;
                        gi.data_mut().iter_mut().for_each(|x| *x *= scale);
                        *slot = Some(gi);
                    }
                }
            }
        }
    }
    for (i, slot) in grads.iter_mut().enumerate() {
        if slot.is_none() {
            *slot = Some(Tensor::zeros(model.params().get(i).shape()));
        }
    }
    let grad_norm = if cfg.clip_norm > 0.0 {
        clip_grad_norm(&mut grads, cfg.clip_norm)
    } else {
        grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
    };
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "step {}: loss {loss}, lr {}, grad norm {grad_norm}",
            opt.step_count() + 1,
            opt.lr
        )));
    }
    opt.step(model.params_mut(), &grads)?;
    Ok(StepStats { loss, grad_norm })
}
