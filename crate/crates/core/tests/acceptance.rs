//! End-to-end acceptance checks. Every criterion prints one PASS/FAIL line
//! to stderr (outside libtest capture); the test fails if any line fails.
//!
//! The sine criteria share one set of trained models, so the whole suite is
//! a single test that runs in order.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use flowcast::backbone::{time_features, Backbone, Bound, ModelConfig, TIME_FEATURES};
use flowcast::data::{
    make_windows, prepare, synth_generate, ContextMode, DataConfig, Prepared, SplitMode, SynthKind,
};
use flowcast::eval::{evaluate, evaluate_baseline, forecast, Baseline, ForecastConfig};
use flowcast::flow::{
    corrected_target, flow_loss, gaussian_like, interpolate, meanflow_target, multi_step_sample,
    one_step_sample, total_derivative, CorrectionSign, DiffusionSchedule, FlowSample, HeadKind,
    ScheduleKind, TimeDerivative, DEFAULT_TIME_STEP,
};
use flowcast::tensor::{grad_check, AdamState, CausalMask, GradCheck, ParamStore, Tape, Tensor, Var};
use flowcast::train::{
    condition, draw_target, fit, head_loss, history_csv, load_checkpoint, patch_targets, save_checkpoint,
    Checkpoint, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn line(&mut self, n: usize, name: &str, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        let mut err = std::io::stderr().lock();
        writeln!(err, "criterion {n:>2} {verdict} {name}: {detail}").unwrap();
        if !pass {
            self.failed.push(n);
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

fn toy_config() -> ModelConfig {
    ModelConfig {
        look_back: 8,
        horizon: 8,
        patch_size: 4,
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_denoise_layers: 1,
        n_context_tokens: 0,
        context_vocab: 1,
        ff_mult: 2,
        head: HeadKind::MeanVelocity,
        scheduler: ScheduleKind::Linear,
        autoregressive: true,
    }
}

fn toy_windows(n: usize) -> Vec<flowcast::data::WindowPair> {
    let d = synth_generate(SynthKind::Sine, n, 0.1, 11).unwrap();
    let cfg = DataConfig {
        look_back: 8,
        horizon: 8,
        context: ContextMode::NoText,
        ..DataConfig::default()
    };
    make_windows(&d, 0..n, &cfg, 1, None).unwrap()
}

type OpCheck = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape<'_>, &[Var]) -> flowcast::Result<Var>>);

fn elementary_ops(rng: &mut ChaCha8Rng) -> Vec<OpCheck> {
    let a = randn(rng, 3, 4);
    let b = randn(rng, 4, 5);
    let bias = randn(rng, 1, 4);
    let pos = Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
    // Weighted sums keep every output element in play.
    let weigh = |tape: &mut Tape<'_>, v: Var, seed: u64| -> flowcast::Result<Var> {
        let shape = tape.shape(v).to_vec();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = randn(&mut r, shape[0], shape[1]);
        let w = tape.constant(w);
        let p = tape.mul(v, w)?;
        Ok(tape.sum(p))
    };
    vec![
        ("matmul", vec![a.clone(), b], Box::new(move |t, v| { let m = t.matmul(v[0], v[1])?; weigh(t, m, 1) })),
        ("add_bias", vec![a.clone(), bias.clone()], Box::new(move |t, v| { let m = t.add_bias(v[0], v[1])?; weigh(t, m, 2) })),
        ("mul", vec![a.clone(), pos.clone()], Box::new(move |t, v| { let m = t.mul(v[0], v[1])?; weigh(t, m, 3) })),
        ("transpose", vec![a.clone()], Box::new(move |t, v| { let m = t.transpose(v[0])?; weigh(t, m, 4) })),
        ("softmax", vec![a.clone()], Box::new(move |t, v| { let m = t.softmax(v[0]); weigh(t, m, 5) })),
        ("softmax_masked", vec![randn(rng, 3, 3)], Box::new(move |t, v| { let m = t.softmax_masked(v[0], CausalMask::new(0)); weigh(t, m, 6) })),
        ("layer_norm", vec![a.clone()], Box::new(move |t, v| { let m = t.layer_norm(v[0]); weigh(t, m, 7) })),
        ("rms_norm", vec![a.clone(), pos.slice_rows(0, 1).unwrap()], Box::new(move |t, v| { let m = t.rms_norm(v[0], v[1])?; weigh(t, m, 8) })),
        ("gelu", vec![a.clone()], Box::new(move |t, v| { let m = t.gelu(v[0]); weigh(t, m, 9) })),
        ("silu", vec![a.clone()], Box::new(move |t, v| { let m = t.silu(v[0]); weigh(t, m, 10) })),
        ("square", vec![a.clone()], Box::new(move |t, v| { let m = t.square(v[0]); weigh(t, m, 11) })),
        ("ln", vec![pos.clone()], Box::new(move |t, v| { let m = t.ln(v[0]); weigh(t, m, 12) })),
        ("embedding", vec![randn(rng, 5, 4)], Box::new(move |t, v| { let m = t.embedding(v[0], &[4, 0, 4, 2])?; weigh(t, m, 13) })),
        ("concat", vec![a.clone(), pos.clone()], Box::new(move |t, v| { let m = t.concat(&[v[0], v[1]], 1)?; weigh(t, m, 14) })),
        ("slice", vec![a.clone()], Box::new(move |t, v| { let m = t.slice(v[0], 1, 1, 3)?; weigh(t, m, 15) })),
        ("mean", vec![a.clone()], Box::new(move |t, v| { let s = t.square(v[0]); Ok(t.mean(s)) })),
    ]
}

fn criterion_gradients(report: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_op = ("", 0.0f64);
    let mut ops_ok = true;
    for (name, point, f) in elementary_ops(&mut rng) {
        let r = grad_check(|t, v| f(t, v), &point, GradCheck { step: 1e-5, tolerance: 1e-4, floor: 1e-6 }).unwrap();
        ops_ok &= r.passed;
        if r.max_rel_err >= worst_op.1 {
            worst_op = (name, r.max_rel_err);
        }
    }

    let m = Backbone::new(toy_config(), 21).unwrap();
    let w = toy_windows(40)[3].clone();
    let mut worst_model = 0.0f64;
    let mut model_ok = true;
    for derivative in [TimeDerivative::Partial, TimeDerivative::Total] {
        let cfg = TrainConfig { time_derivative: derivative, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape, false);
            let z = condition(&m, &mut tape, &b, &w).unwrap();
            let (y, mask) = patch_targets(&w, m.config()).unwrap();
            draw_target(&m, tape.value(z), y, mask, &cfg, &mut rng).unwrap()
        };
        let r = grad_check(
            |tape, vars| {
                let b = Bound::from_vars(vars.to_vec());
                let z = condition(&m, tape, &b, &w)?;
                head_loss(&m, tape, &b, z, &target)
            },
            m.params().tensors(),
            GradCheck { step: 1e-5, tolerance: 1e-3, floor: 1e-6 },
        )
        .unwrap();
        model_ok &= r.passed;
        worst_model = worst_model.max(r.max_rel_err);
    }
    let secs = start.elapsed().as_secs_f64();
    report.line(
        1,
        "gradient correctness",
        ops_ok && model_ok && secs < 30.0,
        format!(
            "model max rel err {worst_model:.2e} (< 1e-3), worst op {} {:.2e} (< 1e-4), {secs:.1}s (< 30s)",
            worst_op.0, worst_op.1
        ),
    );
}

// ---------------------------------------------------------------- 2

fn criterion_flow_identities(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = randn(&mut rng, 3, 4);
    let e = randn(&mut rng, 3, 4);
    let endpoints = interpolate(&y, &e, 0.0, ScheduleKind::Linear) == e && interpolate(&y, &e, 1.0, ScheduleKind::Linear) == y;

    let v = randn(&mut rng, 3, 4);
    let du = randn(&mut rng, 3, 4);
    let collapsed = meanflow_target(&v, &du, 0.3, 0.3).unwrap() == v
        && corrected_target(&v, &du, 0.3, 0.3, CorrectionSign::Plus).unwrap() == v;

    let c = 0.37;
    let constant = |x: &Tensor, _t: f64, _r: f64| Ok(Tensor::full(x.shape(), c));
    let mut a = ChaCha8Rng::seed_from_u64(9);
    let out = one_step_sample(&constant, HeadKind::MeanVelocity, &[5, 4], &mut a).unwrap();
    let noise = gaussian_like(&[5, 4], &mut ChaCha8Rng::seed_from_u64(9));
    let shifted: Vec<f64> = noise.data().iter().map(|n| n + c).collect();
    let stub = out.data() == shifted.as_slice();

    let mut cfg = toy_config();
    cfg.horizon = 12;
    let m = Backbone::new(cfg, 3).unwrap();
    let field = m.velocity_field(randn(&mut rng, 3, 8), 0);
    let sched = DiffusionSchedule::cosine(50);
    let one = one_step_sample(&field, HeadKind::MeanVelocity, &[3, 4], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let multi = multi_step_sample(&field, HeadKind::MeanVelocity, 1, &[3, 4], &sched, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let k1 = one.data().iter().zip(multi.data()).all(|(p, q)| p.to_bits() == q.to_bits());

    report.line(
        2,
        "flow identities",
        endpoints && collapsed && stub && k1,
        format!("endpoints {endpoints}, r==t target {collapsed}, constant field {stub}, k=1 bitwise {k1}"),
    );
}

// ---------------------------------------------------------------- 3

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let d_model = [8, 12, 16][rng.gen_range(0..3)];
    let head = [HeadKind::MeanVelocity, HeadKind::VanillaFm, HeadKind::Diffusion][rng.gen_range(0..3)];
    ModelConfig {
        look_back: 4 * rng.gen_range(1..4),
        horizon: 4 * rng.gen_range(2..5),
        patch_size: 4,
        d_model,
        n_heads: if d_model == 12 { 3 } else { 2 },
        n_enc_layers: rng.gen_range(1..3),
        n_dec_layers: rng.gen_range(1..3),
        n_denoise_layers: rng.gen_range(1..3),
        n_context_tokens: 0,
        context_vocab: 1,
        ff_mult: 2,
        head,
        scheduler: ScheduleKind::Linear,
        autoregressive: true,
    }
}

/// Decoder states and velocities for raw target values, through the BOS
/// shift.
fn decode_targets(m: &Backbone, enc: &Tensor, targets: &[f64], noisy: &Tensor, t: f64, r: f64) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, false);
    let d = m.decoder_inputs(&mut tape, &b, targets).unwrap();
    let e = tape.constant(enc.clone());
    let z = m.decode(&mut tape, &b, d, e).unwrap();
    let x = tape.constant(noisy.clone());
    let u = m.denoise_velocity(&mut tape, &b, x, t, r, z, 0).unwrap();
    (tape.value(z).clone(), tape.value(u).clone())
}

fn criterion_causality(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    let trials = 100;
    for trial in 0..trials {
        let cfg = random_config(&mut rng);
        let m = Backbone::new(cfg.clone(), trial).unwrap();
        let (p, n) = (cfg.patch_size, cfg.n_pred_patches());
        let enc = randn(&mut rng, cfg.n_hist_patches(), cfg.d_model);
        let targets: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let noisy = randn(&mut rng, n, p);
        let t = rng.gen_range(0.0..1.0);
        let r = if cfg.head == HeadKind::MeanVelocity { rng.gen_range(t..=1.0) } else { t };
        let (z0, u0) = decode_targets(&m, &enc, &targets, &noisy, t, r);

        // Target patch k feeds decoder position k + 1; the noisy patch k is
        // denoiser position k.
        let k = rng.gen_range(0..n);
        let mut t2 = targets.clone();
        t2[k * p..(k + 1) * p].iter_mut().for_each(|v| *v += rng.gen_range(0.1..1.0));
        let mut x2 = noisy.clone();
        x2.data_mut()[k * p..(k + 1) * p].iter_mut().for_each(|v| *v -= 0.5);
        let (z1, u1) = decode_targets(&m, &enc, &t2, &x2, t, r);
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        let held = (0..=k).all(|j| same(z0.row(j), z1.row(j))) && (0..k).all(|j| same(u0.row(j), u1.row(j)));
        let moved = k + 1 >= n || !same(z0.row(k + 1), z1.row(k + 1));
        if !(held && moved) {
            failures += 1;
        }
    }

    let mut prefix_failures = 0;
    let d = synth_generate(SynthKind::Sine, 200, 0.1, 5).unwrap();
    for (i, head) in [HeadKind::MeanVelocity, HeadKind::VanillaFm, HeadKind::Diffusion, HeadKind::Regression].into_iter().enumerate() {
        for ar in [true, false] {
            let mut cfg = toy_config();
            cfg.look_back = 16;
            cfg.horizon = 12;
            cfg.head = head;
            cfg.autoregressive = ar;
            let m = Backbone::new(cfg, i as u64).unwrap();
            let dc = DataConfig { look_back: 16, horizon: 12, context: ContextMode::NoText, ..DataConfig::default() };
            let w = &make_windows(&d, 0..200, &dc, 7, None).unwrap()[3];
            let fc = ForecastConfig { samples: 3, nfe: 2, seed: 6, horizon: None };
            let full = forecast(&m, w, 2, &fc).unwrap();
            for h in 1..12 {
                let part = forecast(&m, w, 2, &ForecastConfig { horizon: Some(h), ..fc }).unwrap();
                let ok = part.trajectories.iter().zip(&full.trajectories).all(|(a, b)| {
                    a.iter().zip(&b[..h]).all(|(x, y)| x.to_bits() == y.to_bits()) && a.len() == h
                });
                if !ok {
                    prefix_failures += 1;
                }
            }
        }
    }
    report.line(
        3,
        "causality",
        failures == 0 && prefix_failures == 0,
        format!("{failures}/{trials} perturbation trials failed, {prefix_failures}/88 prefix checks failed"),
    );
}

// ---------------------------------------------------------------- 4

const MU: f64 = 2.0;
const SIGMA: f64 = 0.5;

/// u(x, t, r) as a three-layer SiLU MLP over x and the backbone's time
/// features.
struct Mlp {
    params: ParamStore,
    head: HeadKind,
}

impl Mlp {
    const HIDDEN: usize = 64;

    fn new(head: HeadKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = Self::HIDDEN;
        for (i, (fan_in, fan_out)) in [(1 + TIME_FEATURES, h), (h, h), (h, 1)].into_iter().enumerate() {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
            params.push(format!("l{i}.w"), Tensor::matrix(fan_in, fan_out, w).unwrap());
            params.push(format!("l{i}.b"), Tensor::zeros(&[1, fan_out]));
        }
        Self { params, head }
    }

    /// Rows of `x` are split evenly across `times`.
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

    fn forward(&self, tape: &mut Tape<'_>, p: &[Var], input: Tensor) -> flowcast::Result<Var> {
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

    fn eval(&self, x: &Tensor, t: f64, r: f64) -> flowcast::Result<Tensor> {
        let mut tape = Tape::new();
        let p: Vec<Var> = self.params.tensors().iter().map(|w| tape.param(w, false)).collect();
        let out = self.forward(&mut tape, &p, self.inputs(x, &[(t, r)]))?;
        Ok(tape.value(out).clone())
    }

    /// Adam with cosine decay; 8 groups of 32 draws per step, each group
    /// sharing one (t, r). Targets come from the library's corrected target
    /// with the total derivative.
    fn train(&mut self, steps: usize, lr: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Normal::new(MU, SIGMA).unwrap();
        let mut opt = AdamState::new(&self.params, lr).unwrap();
        let p_eq = if self.head == HeadKind::MeanVelocity { 0.25 } else { 1.0 };
        let (groups, group) = (8, 32);
        for step in 0..steps {
            opt.lr = lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos());
            let mut xs = Vec::with_capacity(groups * group);
            let mut targets = Vec::with_capacity(groups * group);
            let mut times = Vec::with_capacity(groups);
            for _ in 0..groups {
                let y = Tensor::matrix(group, 1, (0..group).map(|_| data.sample(&mut rng)).collect()).unwrap();
                let s = FlowSample::draw(y, ScheduleKind::Linear, p_eq, &mut rng);
                let field = |x: &Tensor, t: f64, r: f64| self.eval(x, t, r);
                let du = total_derivative(&field, &s.noisy, &s.velocity, s.t, s.r, DEFAULT_TIME_STEP).unwrap();
                let target = corrected_target(&s.velocity, &du, s.t, s.r, CorrectionSign::Plus).unwrap();
                xs.extend_from_slice(s.noisy.data());
                targets.extend_from_slice(target.data());
                times.push((s.t, s.r));
            }
            let n = xs.len();
            let x = Tensor::matrix(n, 1, xs).unwrap();
            let target = Tensor::matrix(n, 1, targets).unwrap();
            let input = self.inputs(&x, &times);
            let mut tape = Tape::new();
            let p: Vec<Var> = self.params.tensors().iter().map(|w| tape.param(w, true)).collect();
            let u = self.forward(&mut tape, &p, input).unwrap();
            let loss = flow_loss(&mut tape, u, &target, &Tensor::full(&[n, 1], 1.0)).unwrap();
            let mut g = tape.backward(loss).unwrap();
            let grads: Vec<Option<Tensor>> = p.iter().map(|v| g.take(*v)).collect();
            drop(g);
            opt.step(&mut self.params, &grads).unwrap();
        }
    }
}

fn marginal_sd(t: f64) -> f64 {
    ((1.0 - t).powi(2) + t * t * SIGMA * SIGMA).sqrt()
}

/// E[y - noise | x_t = x] from joint-Gaussian conditioning: x_t has mean
/// t mu and variance (1-t)^2 + t^2 sigma^2, Cov(y, x_t) = t sigma^2 and
/// Cov(noise, x_t) = 1 - t.
fn oracle_velocity(x: f64, t: f64) -> f64 {
    let s2 = marginal_sd(t).powi(2);
    MU + (t * SIGMA * SIGMA - (1.0 - t)) * (x - t * MU) / s2
}

/// (phi_r(x) - x) / (r - t) with the flow map integrated by RK4.
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

/// Largest gap, in standard errors, between the closed form and a
/// brute-force conditional mean of y - noise over draws that land within
/// 0.01 of x.
fn oracle_monte_carlo_z(rng: &mut ChaCha8Rng) -> f64 {
    let data = Normal::new(MU, SIGMA).unwrap();
    let mut worst: f64 = 0.0;
    for &t in &[0.1, 0.4, 0.7, 0.9] {
        for &z in &[-1.0, 0.0, 1.0] {
            let x0 = t * MU + z * marginal_sd(t);
            let mut hits = Vec::with_capacity(4000);
            while hits.len() < 4000 {
                let y = data.sample(rng);
                let e: f64 = rng.sample(StandardNormal);
                let x = (1.0 - t) * e + t * y;
                if (x - x0).abs() < 0.01 {
                    hits.push(y - e);
                }
            }
            let n = hits.len() as f64;
            let mean = hits.iter().sum::<f64>() / n;
            let var = hits.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            worst = worst.max((mean - oracle_velocity(x0, t)).abs() / (var / n).sqrt());
        }
    }
    worst
}

fn rel_l2(pred: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = truth.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

fn criterion_gaussian_oracle(report: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mc_z = oracle_monte_carlo_z(&mut rng);

    let mut inst = Mlp::new(HeadKind::VanillaFm, 1);
    inst.train(10_000, 2e-3, 10);
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for i in 0..19 {
        let t = 0.05 * (i + 1) as f64;
        let xs: Vec<f64> = (0..21).map(|j| t * MU + marginal_sd(t) * (-2.0 + 0.2 * j as f64)).collect();
        let u = inst.eval(&Tensor::matrix(xs.len(), 1, xs.clone()).unwrap(), t, t).unwrap();
        pred.extend_from_slice(u.data());
        truth.extend(xs.iter().map(|x| oracle_velocity(*x, t)));
    }
    let inst_err = rel_l2(&pred, &truth);

    let mut avg = Mlp::new(HeadKind::MeanVelocity, 2);
    avg.train(40_000, 1e-3, 20);
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for _ in 0..400 {
        let t: f64 = rng.gen();
        let r = rng.gen_range(t..=1.0);
        let x = t * MU + marginal_sd(t) * rng.sample::<f64, _>(StandardNormal);
        pred.push(avg.eval(&Tensor::matrix(1, 1, vec![x]).unwrap(), t, r).unwrap().data()[0]);
        truth.push(oracle_average(x, t, r));
    }
    let avg_err = rel_l2(&pred, &truth);

    let field = |x: &Tensor, t: f64, r: f64| avg.eval(x, t, r);
    let s = one_step_sample(&field, HeadKind::MeanVelocity, &[10_000, 1], &mut rng).unwrap();
    let mean = s.data().iter().sum::<f64>() / s.len() as f64;
    let sd = (s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
    let secs = start.elapsed().as_secs_f64();

    let pass = mc_z < 4.0
        && inst_err <= 0.05
        && avg_err <= 0.08
        && (mean - MU).abs() <= 0.05
        && (sd - SIGMA).abs() <= 0.1 * SIGMA
        && secs < 300.0;
    report.line(
        4,
        "gaussian transport oracle",
        pass,
        format!(
            "closed form vs monte carlo {mc_z:.1} standard errors (< 4), instantaneous rel L2 {inst_err:.4} (<= 0.05), \
             average rel L2 {avg_err:.4} (<= 0.08), one-step mean {mean:.4} (2 +- 0.05) sd {sd:.4} (0.5 +- 10%), {secs:.0}s (< 300s)"
        ),
    );
}

// ---------------------------------------------------------------- 5-8, 10

const SEEDS: u64 = 5;

fn sine_data() -> Prepared {
    let series = synth_generate(SynthKind::Sine, 5000, 0.1, 0).unwrap();
    // Test windows at a stride coprime with the period of 24 cover every phase.
    let cfg = DataConfig { look_back: 96, horizon: 24, stride: 2, eval_stride: 5, ..DataConfig::default() };
    prepare(&series, &cfg).unwrap()
}

fn sine_model(data: &Prepared, head: HeadKind, autoregressive: bool, seed: u64) -> Backbone {
    let cfg = ModelConfig { horizon: 24, head, autoregressive, ..ModelConfig::default() };
    let train = TrainConfig {
        lr: 5e-4,
        seed,
        time_derivative: TimeDerivative::Total,
        correction: CorrectionSign::Plus,
        ..TrainConfig::default()
    };
    let model = Backbone::new(cfg, seed).unwrap();
    fit(model, &data.train, &data.val, &train, |_| {}).unwrap().best
}

fn mse(model: &Backbone, data: &Prepared, nfe: usize, samples: usize) -> f64 {
    let fc = ForecastConfig { nfe, samples, seed: 7, horizon: None };
    evaluate(model, &data.test, &fc).unwrap().mse
}

fn criteria_sine(report: &mut Report) {
    let data = sine_data();
    let persistence = evaluate_baseline(&data.test, Baseline::Persistence, 24).unwrap().mse;

    let start = Instant::now();
    let full: Vec<Backbone> = (0..SEEDS).map(|s| sine_model(&data, HeadKind::MeanVelocity, true, s)).collect();
    let full_mse: Vec<f64> = full.iter().map(|m| mse(m, &data, 1, 20)).collect();
    let secs = start.elapsed().as_secs_f64();
    let beats = full_mse.iter().filter(|m| **m < 0.5 * persistence).count();
    report.line(
        5,
        "desk-scale forecasting",
        beats >= 4 && secs < 600.0,
        format!(
            "test mse {} vs 0.5 x persistence {:.4}; {beats}/5 seeds below (>= 4), {secs:.0}s (< 600s)",
            fmt_list(&full_mse),
            0.5 * persistence
        ),
    );

    let no_flow: Vec<f64> = (0..SEEDS).map(|s| mse(&sine_model(&data, HeadKind::Regression, true, s), &data, 1, 1)).collect();
    let no_ar_flow: Vec<f64> = (0..SEEDS).map(|s| mse(&sine_model(&data, HeadKind::Regression, false, s), &data, 1, 1)).collect();
    let wins = (0..SEEDS as usize).filter(|&i| full_mse[i] <= no_flow[i] && full_mse[i] <= no_ar_flow[i]).count();
    report.line(
        6,
        "ablation direction",
        wins >= 4,
        format!(
            "full {} / w/o flow {} / w/o ar-flow {}; full best in {wins}/5 seeds (>= 4)",
            fmt_list(&full_mse),
            fmt_list(&no_flow),
            fmt_list(&no_ar_flow)
        ),
    );

    let one = full_mse[0];
    let two = mse(&full[0], &data, 2, 20);
    let rel = (one - two).abs() / one.min(two);
    report.line(7, "nfe parity", rel <= 0.10, format!("mse nfe=1 {one:.4}, nfe=2 {two:.4}, relative gap {rel:.3} (<= 0.10)"));

    let fc = ForecastConfig { nfe: 1, samples: 100, seed: 8, horizon: None };
    let cal = evaluate(&full[0], &data.test, &fc).unwrap();
    let (c50, c80) = (cal.coverage50.unwrap(), cal.coverage80.unwrap());
    report.line(
        8,
        "interval calibration",
        cal.points >= 500 && (0.70..=0.90).contains(&c80) && (0.40..=0.65).contains(&c50),
        format!("coverage80 {c80:.3} in [0.70, 0.90], coverage50 {c50:.3} in [0.40, 0.65], {} points", cal.points),
    );

    let diffusion = sine_model(&data, HeadKind::Diffusion, true, 0);
    let timed = |m: &Backbone, nfe: usize| {
        let start = Instant::now();
        let v = mse(m, &data, nfe, 20);
        (v, start.elapsed().as_secs_f64())
    };
    let (mv_mse, mv_secs) = timed(&full[0], 1);
    let (df_mse, df_secs) = timed(&diffusion, 50);
    report.line(
        10,
        "generative-head comparison",
        mv_mse <= 1.1 * df_mse && df_secs >= 10.0 * mv_secs,
        format!(
            "mean velocity nfe=1 mse {mv_mse:.4} vs diffusion 50 steps {df_mse:.4} (ratio {:.3} <= 1.1); \
             sampling {mv_secs:.2}s vs {df_secs:.2}s (speedup {:.1} >= 10)",
            mv_mse / df_mse,
            df_secs / mv_secs
        ),
    );
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------- 9

/// Windows whose targets lie in `lo..hi`, counted by scanning every origin.
fn brute_windows(lo: usize, hi: usize, l: usize, h: usize, stride: usize) -> usize {
    if lo == hi {
        return 0;
    }
    let first = lo.saturating_sub(l);
    (0..hi).filter(|&o| o >= first && (o - first) % stride == 0 && o + l + h <= hi).count()
}

fn run_cli(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_flowcast")).arg("--out-dir").arg(dir).args(args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn criterion_infrastructure(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut split_mismatch = 0;
    let trials = 200;
    for _ in 0..trials {
        let l = rng.gen_range(1..12);
        let h = rng.gen_range(1..8);
        let stride = rng.gen_range(1..5);
        let len = rng.gen_range(l + h..300);
        let d = synth_generate(SynthKind::Sine, len, 0.1, 1).unwrap();
        let cfg = DataConfig {
            look_back: l,
            horizon: h,
            stride,
            eval_stride: stride,
            split: SplitMode::Ratio { train: 0.7, val: 0.1, test: 0.2 },
            context: ContextMode::NoText,
            ..DataConfig::default()
        };
        let a = (len as f64 * 0.7).round() as usize;
        let b = (len as f64 * 0.8).round() as usize;
        let segments = [(0, a), (a, b), (b, len)];
        let feasible = segments.iter().all(|&(lo, hi)| lo == hi || brute_windows(lo, hi, l, h, 1) > 0) && a > 0;
        match prepare(&d, &cfg) {
            Ok(p) => {
                let got = [p.train.len(), p.val.len(), p.test.len()];
                let want = segments.map(|(lo, hi)| if lo == 0 { brute_windows(0, hi, 0, h + l, stride) } else { brute_windows(lo, hi, l, h, stride) });
                if !feasible || got != want {
                    split_mismatch += 1;
                }
            }
            Err(_) => {
                if feasible {
                    split_mismatch += 1;
                }
            }
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let m = Backbone::new(toy_config(), 5).unwrap();
    let mut ck = Checkpoint::new(&m);
    ck.optimizer = Some(AdamState::new(m.params(), 1e-3).unwrap());
    ck.meta.insert("note".into(), "round trip".into());
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let round_trip = back == ck
        && back.to_bytes().unwrap() == std::fs::read(&path).unwrap()
        && back
            .params
            .tensors()
            .iter()
            .zip(ck.params.tensors())
            .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let series = dir.path().join("s.csv");
    run_cli(dir.path(), &["synth", "--kind", "sine", "--n", "400", "--out", series.to_str().unwrap()]);
    let tiny = [
        "--model.look_back=16", "--model.horizon=12", "--model.d_model=8", "--model.n_heads=2",
        "--model.n_enc_layers=1", "--model.n_dec_layers=1", "--model.n_denoise_layers=1",
        "--data.stride=4", "--data.eval_stride=6", "--train.epochs=2",
    ];
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        std::fs::create_dir_all(&out).unwrap();
        let mut args = vec!["--threads", "1", "--seed", "3", "train", "--data", series.to_str().unwrap()];
        args.extend_from_slice(&tiny);
        run_cli(&out, &args);
        let c = out.join("best.ckpt");
        run_cli(&out, &["--threads", "1", "eval", "--checkpoint", c.to_str().unwrap(), "--data", series.to_str().unwrap(), "--horizons", "6,12", "--samples", "20"]);
        (std::fs::read(out.join("history.csv")).unwrap(), std::fs::read(out.join("eval.csv")).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    let stored = history_csv(&load_checkpoint(&dir.path().join("a").join("last.ckpt")).unwrap().history);
    let identical = a == b && a.0 == stored.as_bytes() && String::from_utf8_lossy(&a.1).lines().count() == 3;

    report.line(
        9,
        "data and infrastructure",
        split_mismatch == 0 && round_trip && identical,
        format!(
            "{split_mismatch}/{trials} split mismatches, checkpoint bitwise {round_trip}, repeated runs byte-identical {identical}"
        ),
    );
}

#[test]
fn acceptance() {
    let mut report = Report { failed: Vec::new() };
    criterion_gradients(&mut report);
    criterion_flow_identities(&mut report);
    criterion_causality(&mut report);
    criterion_gaussian_oracle(&mut report);
    criterion_infrastructure(&mut report);
    criteria_sine(&mut report);
    assert!(report.failed.is_empty(), "failed criteria: {:?}", report.failed);
}
