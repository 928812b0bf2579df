//! Learns the transport from N(0, 1) noise to N(2, 0.25) data with a small
//! MLP, once as an instantaneous field and once as an average-velocity field,
//! and compares both with the exact Gaussian flow.
//!
//! cargo run --release --example gaussian_transport -- [steps]
//!
//! The default of 40000 average-field steps takes about two minutes.

use std::time::Instant;

use flowcast::backbone::{time_features, TIME_FEATURES};
use flowcast::flow::{
    corrected_target, flow_loss, multi_step_sample, one_step_sample, total_derivative, CorrectionSign,
    DiffusionSchedule, FlowSample, HeadKind, ScheduleKind, DEFAULT_TIME_STEP,
};
use flowcast::tensor::{AdamState, ParamStore, Tape, Tensor, Var};
use flowcast::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const MU: f64 = 2.0;
const SIGMA: f64 = 0.5;
const HIDDEN: usize = 64;
const GROUPS: usize = 8;
const GROUP: usize = 32;

struct Mlp {
    params: ParamStore,
    head: HeadKind,
}

impl Mlp {
    fn new(head: HeadKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (i, (fan_in, fan_out)) in [(1 + TIME_FEATURES, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, 1)].into_iter().enumerate() {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
            params.push(format!("l{i}.w"), Tensor::matrix(fan_in, fan_out, w).unwrap());
            params.push(format!("l{i}.b"), Tensor::zeros(&[1, fan_out]));
        }
        Self { params, head }
    }

    fn inputs(&self, x: &Tensor, times: &[(f64, f64)]) -> Tensor {
        let per = x.len() / times.len();
        let mut data = Vec::with_capacity(x.len() * (1 + TIME_FEATURES));
        for (i, xv) in x.data().iter().enumerate() {
            let (t, r) = times[i / per];
            data.push(*xv);
            data.extend_from_slice(time_features(t, r, self.head).data());
        }
        Tensor::matrix(x.len(), 1 + TIME_FEATURES, data).unwrap()
    }

    fn forward(&self, tape: &mut Tape<'_>, p: &[Var], input: Tensor) -> Result<Var> {
        let mut h = tape.constant(input);
        for l in 0..3 {
            h = tape.matmul(h, p[2 * l])?;
            h = tape.add_bias(h, p[2 * l + 1])?;
            if l < 2 {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }

    /// u for every row of `x` (shape `n x 1`), all at the same (t, r).
    fn eval(&self, x: &Tensor, t: f64, r: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p: Vec<Var> = self.params.tensors().iter().map(|w| tape.param(w, false)).collect();
        let out = self.forward(&mut tape, &p, self.inputs(x, &[(t, r)]))?;
        Ok(tape.value(out).clone())
    }
}

/// Adam with cosine decay. Each step draws GROUPS groups of GROUP values,
/// one (t, r) per group.
fn train(net: &mut Mlp, steps: usize, lr: f64, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Normal::new(MU, SIGMA).unwrap();
    let mut opt = AdamState::new(&net.params, lr)?;
    let p_eq = if net.head == HeadKind::MeanVelocity { 0.25 } else { 1.0 };
    for step in 0..steps {
        opt.lr = lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos());
        let mut xs = Vec::with_capacity(GROUPS * GROUP);
        let mut targets = Vec::with_capacity(GROUPS * GROUP);
        let mut times = Vec::with_capacity(GROUPS);
        for _ in 0..GROUPS {
            let y = Tensor::matrix(GROUP, 1, (0..GROUP).map(|_| data.sample(&mut rng)).collect())?;
            let s = FlowSample::draw(y, ScheduleKind::Linear, p_eq, &mut rng);
            let field = |x: &Tensor, t: f64, r: f64| net.eval(x, t, r);
            let du = total_derivative(&field, &s.noisy, &s.velocity, s.t, s.r, DEFAULT_TIME_STEP)?;
            let target = corrected_target(&s.velocity, &du, s.t, s.r, CorrectionSign::Plus)?;
            xs.extend_from_slice(s.noisy.data());
            targets.extend_from_slice(target.data());
            times.push((s.t, s.r));
        }
        let n = xs.len();
        let x = Tensor::matrix(n, 1, xs)?;
        let target = Tensor::matrix(n, 1, targets)?;
        let input = net.inputs(&x, &times);
        let mut tape = Tape::new();
        let p: Vec<Var> = net.params.tensors().iter().map(|w| tape.param(w, true)).collect();
        let u = net.forward(&mut tape, &p, input)?;
        let loss = flow_loss(&mut tape, u, &target, &Tensor::full(&[n, 1], 1.0))?;
        let mut g = tape.backward(loss)?;
        let grads: Vec<Option<Tensor>> = p.iter().map(|v| g.take(*v)).collect();
        drop(g);
        opt.step(&mut net.params, &grads)?;
    }
    Ok(())
}

fn marginal_sd(t: f64) -> f64 {
    ((1.0 - t).powi(2) + t * t * SIGMA * SIGMA).sqrt()
}

/// E[y - noise | x_t = x] for the linear path.
fn oracle_velocity(x: f64, t: f64) -> f64 {
    let s2 = marginal_sd(t).powi(2);
    MU + (t * SIGMA * SIGMA - (1.0 - t)) * (x - t * MU) / s2
}

fn oracle_average(x: f64, t: f64, r: f64) -> f64 {
    if r == t {
        return oracle_velocity(x, t);
    }
    let steps = 200;
    let h = (r - t) / steps as f64;
    let mut z = x;
    for i in 0..steps {
        let s = t + i as f64 * h;
        let k1 = oracle_velocity(z, s);
        let k2 = oracle_velocity(z + h / 2.0 * k1, s + h / 2.0);
        let k3 = oracle_velocity(z + h / 2.0 * k2, s + h / 2.0);
        let k4 = oracle_velocity(z + h * k3, s + h);
        z += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    (z - x) / (r - t)
}

fn rel_l2(pred: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = truth.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

fn main() -> Result<()> {
    let steps = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(40_000);
    let start = Instant::now();

    let mut inst = Mlp::new(HeadKind::VanillaFm, 1);
    train(&mut inst, steps / 4, 2e-3, 10)?;
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for i in 0..19 {
        let t = 0.05 * (i + 1) as f64;
        let xs: Vec<f64> = (0..21).map(|j| t * MU + marginal_sd(t) * (-2.0 + 0.2 * j as f64)).collect();
        let u = inst.eval(&Tensor::matrix(xs.len(), 1, xs.clone())?, t, t)?;
        pred.extend_from_slice(u.data());
        truth.extend(xs.iter().map(|x| oracle_velocity(*x, t)));
    }
    println!("instantaneous field rel L2 {:.4}  ({:.1}s)", rel_l2(&pred, &truth), start.elapsed().as_secs_f64());


    let mut avg = Mlp::new(HeadKind::MeanVelocity, 2);
    train(&mut avg, steps, 1e-3, 20)?;
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for _ in 0..200 {
        let t: f64 = rng.gen();
        let r = rng.gen_range(t..=1.0);
        let x = t * MU + marginal_sd(t) * rng.sample::<f64, _>(rand_distr::StandardNormal);
        pred.push(avg.eval(&Tensor::matrix(1, 1, vec![x])?, t, r)?.data()[0]);
        truth.push(oracle_average(x, t, r));
    }
    println!("average field rel L2 {:.4}  ({:.1}s)", rel_l2(&pred, &truth), start.elapsed().as_secs_f64());

    let field = |x: &Tensor, t: f64, r: f64| avg.eval(x, t, r);
    let one = one_step_sample(&field, HeadKind::MeanVelocity, &[10_000, 1], &mut rng)?;
    let two = multi_step_sample(&field, HeadKind::MeanVelocity, 2, &[10_000, 1], &DiffusionSchedule::cosine(50), &mut rng)?;
    for (name, s) in [("1 step", one), ("2 steps", two)] {
        let m = s.data().iter().sum::<f64>() / s.len() as f64;
        let sd = (s.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
        println!("{name}: mean {m:.4} sd {sd:.4}  (target {MU} / {SIGMA})");
    }
    Ok(())
}
