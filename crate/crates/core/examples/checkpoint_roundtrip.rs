//! Trains briefly, saves a checkpoint with optimizer state and history,
//! loads it back, and confirms the reloaded model forecasts bit for bit the
//! same trajectories. A corrupted copy is rejected.
//!
//! cargo run --release --example checkpoint_roundtrip

use flowcast::backbone::{Backbone, ModelConfig};
use flowcast::data::{prepare, synth_generate, DataConfig, SynthKind};
use flowcast::eval::{forecast, ForecastConfig};
use flowcast::train::{fit, load_checkpoint, save_checkpoint, Checkpoint, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let series = synth_generate(SynthKind::TrendSine, 800, 0.1, 2)?;
    let data = prepare(&series, &DataConfig { look_back: 32, horizon: 16, stride: 4, eval_stride: 8, ..DataConfig::default() })?;
    let config = ModelConfig { look_back: 32, horizon: 16, d_model: 16, n_heads: 2, ..ModelConfig::default() };
    let out = fit(Backbone::new(config, 4)?, &data.train, &data.val, &TrainConfig { epochs: 2, ..TrainConfig::default() }, |_| {})?;

    let mut ck = Checkpoint::new(&out.last);
    ck.optimizer = Some(out.optimizer.clone());
    ck.history = out.history.clone();
    ck.meta.insert("note".into(), "example run".into());

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &ck)?;
    let bytes = std::fs::read(&path)?;
    println!("wrote {} bytes for {} scalars", bytes.len(), ck.params.num_scalars());

    let back = load_checkpoint(&path)?;
    println!(
        "reloaded: identical {}, optimizer step {}, {} history rows, meta {:?}",
        back == ck,
        back.optimizer.as_ref().map_or(0, |o| o.step_count()),
        back.history.len(),
        back.meta
    );

    let cfg = ForecastConfig { samples: 5, seed: 9, ..ForecastConfig::default() };
    let before = forecast(&out.last, &data.test[0], 0, &cfg)?;
    let after = forecast(&back.model()?, &data.test[0], 0, &cfg)?;
    println!("forecasts match bitwise: {}", before == after);

    let mut damaged = bytes.clone();
    let mid = damaged.len() / 2;
    damaged[mid] ^= 0x40;
    let bad = dir.path().join("damaged.ckpt");
    std::fs::write(&bad, damaged)?;
    match load_checkpoint(&bad) {
        Ok(_) => println!("damaged copy loaded (unexpected)"),
        Err(e) => println!("damaged copy rejected: {e}"),
    }
    Ok(())
}
