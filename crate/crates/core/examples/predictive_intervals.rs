//! Trains a small forecaster, draws 100 one-step trajectories per window,
//! and reports the quantile bands for one window plus the empirical band
//! coverage over the test split.
//!
//! cargo run --release --example predictive_intervals -- [epochs]

use flowcast::backbone::{Backbone, ModelConfig};
use flowcast::data::{prepare, synth_generate, DataConfig, SynthKind};
use flowcast::eval::{evaluate, forecast, interval_coverage, ForecastConfig};
use flowcast::flow::{CorrectionSign, TimeDerivative};
use flowcast::train::{fit, TrainConfig};

fn main() -> flowcast::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4);
    let series = synth_generate(SynthKind::Sine, 3000, 0.1, 3)?;
    let data = prepare(
        &series,
        &DataConfig { look_back: 48, horizon: 24, stride: 3, eval_stride: 5, ..DataConfig::default() },
    )?;
    let config = ModelConfig { look_back: 48, horizon: 24, d_model: 32, ..ModelConfig::default() };
    let train = TrainConfig {
        epochs,
        lr: 5e-4,
        time_derivative: TimeDerivative::Total,
        correction: CorrectionSign::Plus,
        ..TrainConfig::default()
    };
    let out = fit(Backbone::new(config, 0)?, &data.train, &data.val, &train, |r| {
        println!("epoch {} loss {:.4} val mse {:.4}", r.epoch, r.train_loss, r.val_mse);
    })?;

    let cfg = ForecastConfig { samples: 100, seed: 1, ..ForecastConfig::default() };
    let w = &data.test[7];
    let f = forecast(&out.best, w, 7, &cfg)?;
    let truth = w.raw_target();
    println!("step   truth    mean  [q10    q25    q75    q90]");
    for k in 0..truth.len() {
        println!(
            "{k:>4} {:>7.3} {:>7.3}  [{:.3} {:.3} {:.3} {:.3}]",
            truth[k], f.mean[k], f.q10[k], f.q25[k], f.q75[k], f.q90[k]
        );
    }
    let c = interval_coverage(&f, &truth)?;
    println!("this window: 50% band covers {:.2}, 80% band covers {:.2}", c.band50, c.band80);

    let all = evaluate(&out.best, &data.test, &cfg)?;
    println!(
        "test split ({} points): mse {:.4}, coverage50 {:.3}, coverage80 {:.3}",
        all.points,
        all.mse,
        all.coverage50.unwrap_or(f64::NAN),
        all.coverage80.unwrap_or(f64::NAN)
    );
    Ok(())
}
