use crate::backbone::Backbone;
use crate::data::WindowPair;
use crate::error::{Error, Result};
use crate::eval::{band_hits, forecast, mean_baseline, persistence, ForecastConfig, MIN_INTERVAL_SAMPLES};

/// Pooled metrics over a set of windows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub mse: f64,
    pub mae: f64,
    /// Present when at least [`MIN_INTERVAL_SAMPLES`] trajectories were drawn.
    pub coverage50: Option<f64>,
    pub coverage80: Option<f64>,
    pub points: usize,
    pub nfe: usize,
}

/// Forecasts every window and pools squared and absolute errors of the
/// mean path over all target points.
pub fn evaluate(model: &Backbone, windows: &[WindowPair], cfg: &ForecastConfig) -> Result<EvalSummary> {
    evaluate_threaded(model, windows, cfg, 1)
}

#[derive(Default)]
struct WindowScore {
    se: f64,
    ae: f64,
    h50: usize,
    h80: usize,
    nfe: usize,
}

fn score(model: &Backbone, w: &WindowPair, index: usize, cfg: &ForecastConfig, horizon: usize) -> Result<WindowScore> {
    if w.y_true.len() < horizon {
        return Err(Error::InvalidArgument(format!(
            "window {index} has {} target steps, evaluation needs {horizon}",
            w.y_true.len()
        )));
    }
    let r = forecast(model, w, index, cfg)?;
    let truth = &w.raw_target()[..horizon];
    let mut s = WindowScore {
        nfe: r.nfe,
        ..WindowScore::default()
    };
    for (p, t) in r.mean.iter().zip(truth) {
        s.se += (p - t).powi(2);
        s.ae += (p - t).abs();
    }
    if cfg.samples >= MIN_INTERVAL_SAMPLES {
        (s.h50, s.h80) = band_hits(&r, truth)?;
    }
    Ok(s)
}

/// [`evaluate`] over `threads` workers. Windows keep their own random
/// streams and are reduced in order, so the result does not depend on the
/// thread count.
pub fn evaluate_threaded(
    model: &Backbone,
    windows: &[WindowPair],
    cfg: &ForecastConfig,
    threads: usize,
) -> Result<EvalSummary> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    if threads == 0 {
        return Err(Error::InvalidArgument("threads must be >= 1".into()));
    }
    let horizon = cfg.horizon.unwrap_or(model.config().horizon);
    let scores: Vec<Result<WindowScore>> = if threads == 1 {
        windows
            .iter()
            .enumerate()
            .map(|(i, w)| score(model, w, i, cfg, horizon))
            .collect()
    } else {
        let chunk = windows.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = windows
                .chunks(chunk)
                .enumerate()
                .map(|(c, part)| {
                    scope.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(i, w)| score(model, w, c * chunk + i, cfg, horizon))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let (mut se, mut ae, mut h50, mut h80, mut nfe) = (0.0, 0.0, 0, 0, 0);
    for s in scores {
        let s = s?;
        se += s.se;
        ae += s.ae;
        h50 += s.h50;
        h80 += s.h80;
        nfe = s.nfe;
    }
    let points = windows.len() * horizon;
    let n = points as f64;
    let intervals = cfg.samples >= MIN_INTERVAL_SAMPLES;
    Ok(EvalSummary {
        mse: se / n,
        mae: ae / n,
        coverage50: intervals.then(|| h50 as f64 / n),
        coverage80: intervals.then(|| h80 as f64 / n),
        points,
        nfe,
    })
}

/// Reference forecasters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Persistence,
    Mean,
}

/// Pooled metrics of a baseline over the first `horizon` steps.
pub fn evaluate_baseline(windows: &[WindowPair], kind: Baseline, horizon: usize) -> Result<EvalSummary> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let (mut se, mut ae, mut points) = (0.0, 0.0, 0);
    for w in windows {
        if horizon > w.y_true.len() {
            return Err(Error::InvalidArgument(format!(
                "baseline horizon {horizon} exceeds window horizon {}",
                w.y_true.len()
            )));
        }
        let pred = match kind {
            Baseline::Persistence => persistence(w, horizon),
            Baseline::Mean => mean_baseline(w, horizon),
        };
        for (p, t) in pred.iter().zip(&w.raw_target()[..horizon]) {
            se += (p - t).powi(2);
            ae += (p - t).abs();
        }
        points += horizon;
    }
    let n = points as f64;
    Ok(EvalSummary {
        mse: se / n,
        mae: ae / n,
        coverage50: None,
        coverage80: None,
        points,
        nfe: 0,
    })
}
