//! Trains the default model on a noisy synthetic sine and compares its
//! one-step forecasts with the persistence baseline.
//!
//! cargo run --release --example train_sine -- [epochs] [stride] [seed]
//!
//! Ten epochs at stride 2 take under two minutes on one core.

use std::time::Instant;

use flowcast::backbone::{Backbone, ModelConfig};
use flowcast::data::{prepare, synth_generate, DataConfig, SynthKind};
use flowcast::eval::{evaluate, evaluate_baseline, Baseline, ForecastConfig};
use flowcast::flow::{CorrectionSign, TimeDerivative};
use flowcast::train::{fit, TrainConfig};

fn main() -> flowcast::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let epochs = args.first().copied().unwrap_or(10) as usize;
    let stride = args.get(1).copied().unwrap_or(2) as usize;
    let seed = args.get(2).copied().unwrap_or(0);

    let series = synth_generate(SynthKind::Sine, 5000, 0.1, 0)?;
    // The sine has period 24; a coprime evaluation stride covers every phase.
    let data_cfg = DataConfig {
        look_back: 96,
        horizon: 24,
        stride,
        eval_stride: 5,
        ..DataConfig::default()
    };
    let data = prepare(&series, &data_cfg)?;
    println!(
        "windows: train {} val {} test {}",
        data.train.len(),
        data.val.len(),
        data.test.len()
    );

    let model = Backbone::new(ModelConfig { horizon: 24, ..ModelConfig::default() }, seed)?;
    let train_cfg = TrainConfig {
        epochs,
        lr: 5e-4,
        seed,
        time_derivative: TimeDerivative::Total,
        correction: CorrectionSign::Plus,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = fit(model, &data.train, &data.val, &train_cfg, |r| {
        println!(
            "epoch {:>2}  loss {:.4}  val mse {:.4}  ({:.1}s)",
            r.epoch,
            r.train_loss,
            r.val_mse,
            start.elapsed().as_secs_f64()
        );
    })?;

    let fc = ForecastConfig { samples: 20, ..ForecastConfig::default() };
    let model_eval = evaluate(&out.best, &data.test, &fc)?;
    let persistence = evaluate_baseline(&data.test, Baseline::Persistence, 24)?;
    println!(
        "best epoch {}: test mse {:.4} mae {:.4} | persistence mse {:.4} | ratio {:.3}",
        out.best_epoch,
        model_eval.mse,
        model_eval.mae,
        persistence.mse,
        model_eval.mse / persistence.mse
    );
    Ok(())
}
