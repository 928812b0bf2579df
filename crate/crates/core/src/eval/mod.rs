//! Autoregressive forecasting, metrics, intervals and sweeps.

mod evaluate;
mod forecast;
mod metrics;
mod sweep;

pub use evaluate::{evaluate, evaluate_baseline, evaluate_threaded, Baseline, EvalSummary};
pub use forecast::{
    forecast, mean_baseline, persistence, quantile_sorted, trajectory_rng, ForecastConfig, ForecastResult,
};
pub use metrics::{band_hits, interval_coverage, metrics, Coverage, MIN_INTERVAL_SAMPLES};
pub use sweep::{run_sweep, sweep_csv, SweepAxis, SweepRow, SweepSpec, SWEEP_HEADER};
