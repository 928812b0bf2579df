//! Runs a sweep over one axis on two synthetic datasets and prints the
//! report CSV. Any axis works; the ablation axis is the default.
//!
//! cargo run --release --example ablation_sweep -- [nfe|scheduler|patch_size|ablation|head|domain]

use flowcast::backbone::ModelConfig;
use flowcast::data::{synth_generate, DataConfig, SynthKind};
use flowcast::eval::{run_sweep, sweep_csv, SweepAxis, SweepSpec};
use flowcast::train::TrainConfig;

fn main() -> flowcast::Result<()> {
    let axis: SweepAxis = std::env::args().nth(1).as_deref().unwrap_or("ablation").parse()?;
    let datasets = [
        synth_generate(SynthKind::Sine, 1200, 0.1, 0)?,
        synth_generate(SynthKind::TrendSine, 1200, 0.1, 1)?,
    ];

    let mut spec = SweepSpec::new(axis);
    spec.seeds = vec![0, 1];
    spec.horizons = vec![12, 24];
    spec.samples = 20;
    spec.timing = true;
    spec.model = ModelConfig { look_back: 48, d_model: 16, n_heads: 2, ..ModelConfig::default() };
    spec.data = DataConfig { look_back: 48, stride: 8, eval_stride: 12, ..DataConfig::default() };
    spec.train = TrainConfig { epochs: 2, lr: 5e-4, ..TrainConfig::default() };

    println!("cells: {}", spec.resolved_cells().join(", "));
    let rows = run_sweep(&spec, &datasets, |r| {
        eprintln!("{} {} h={} seed={} mse {:.4}", r.cell, r.dataset, r.horizon, r.seed, r.mse);
    })?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}
