//! Checks tape gradients against central finite differences, first for a
//! hand-built attention block and then for the full training loss of a toy
//! forecaster.
//!
//! cargo run --release --example gradient_check

use flowcast::backbone::{Backbone, Bound, ModelConfig};
use flowcast::data::{make_windows, synth_generate, ContextMode, DataConfig, SynthKind};
use flowcast::flow::{HeadKind, TimeDerivative};
use flowcast::tensor::{grad_check, CausalMask, GradCheck, Tensor};
use flowcast::train::{condition, draw_target, head_loss, patch_targets, TrainConfig};
use flowcast::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let point = vec![random(&mut rng, 5, 4), random(&mut rng, 4, 4), random(&mut rng, 4, 4), random(&mut rng, 4, 4)];
    let attention = grad_check(
        |tape, v| {
            let q = tape.matmul(v[0], v[1])?;
            let k = tape.matmul(v[0], v[2])?;
            let val = tape.matmul(v[0], v[3])?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, 0.5);
            let weights = tape.softmax_masked(scores, CausalMask::new(0));
            let out = tape.matmul(weights, val)?;
            let out = tape.gelu(out);
            let sq = tape.square(out);
            Ok(tape.mean(sq))
        },
        &point,
        GradCheck::with_tolerance(1e-4),
    )?;
    println!(
        "causal attention: {} entries, max rel err {:.2e}, passed {}",
        attention.checked, attention.max_rel_err, attention.passed
    );

    let config = ModelConfig {
        look_back: 8,
        horizon: 8,
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_denoise_layers: 1,
        n_context_tokens: 0,
        context_vocab: 1,
        ff_mult: 2,
        ..ModelConfig::default()
    };
    let series = synth_generate(SynthKind::Sine, 40, 0.1, 1)?;
    let data_cfg = DataConfig { look_back: 8, horizon: 8, context: ContextMode::NoText, ..DataConfig::default() };
    let window = make_windows(&series, 0..40, &data_cfg, 1, None)?.swap_remove(3);

    for head in [HeadKind::MeanVelocity, HeadKind::VanillaFm, HeadKind::Diffusion, HeadKind::Regression] {
        let model = Backbone::new(ModelConfig { head, ..config.clone() }, 21)?;
        let train = TrainConfig { time_derivative: TimeDerivative::Total, ..TrainConfig::default() };
        // The corrected target is a constant of the loss, so it is drawn once.
        let target = {
            let mut tape = flowcast::tensor::Tape::new();
            let b = model.bind(&mut tape, false);
            let z = condition(&model, &mut tape, &b, &window)?;
            let (y, mask) = patch_targets(&window, model.config())?;
            draw_target(&model, tape.value(z), y, mask, &train, &mut rng)?
        };
        let report = grad_check(
            |tape, vars| {
                let b = Bound::from_vars(vars.to_vec());
                let z = condition(&model, tape, &b, &window)?;
                head_loss(&model, tape, &b, z, &target)
            },
            model.params().tensors(),
            GradCheck::with_tolerance(1e-3),
        )?;
        println!(
            "{:>13} loss: {} parameters, max rel err {:.2e}, passed {}",
            head.to_string(),
            report.checked, report.max_rel_err, report.passed
        );
    }
    Ok(())
}
