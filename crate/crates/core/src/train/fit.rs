use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::data::WindowPair;
use crate::error::{Error, Result};
use crate::eval::{evaluate, ForecastConfig};
use crate::tensor::AdamState;
use crate::train::{train_step, TrainConfig};

/// One line of training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when there is no validation split.
    pub val_mse: f64,
    pub val_mae: f64,
}

/// Models and history produced by [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters with the lowest validation MSE (the final ones without validation data).
    pub best: Backbone,
    pub best_epoch: usize,
    pub last: Backbone,
    pub optimizer: AdamState,
    pub history: Vec<EpochRecord>,
}

/// Trains for `cfg.epochs` passes over shuffled `train` windows. After each
/// epoch the model forecasts every `val` window with one one-step trajectory.
pub fn fit(
    mut model: Backbone,
    train: &[WindowPair],
    val: &[WindowPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let mut opt = AdamState::new(model.params(), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Backbone)> = None;
    let eval_cfg = ForecastConfig {
        nfe: 1,
        samples: 1,
        seed: cfg.eval_seed,
        horizon: None,
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&WindowPair> = chunk.iter().map(|&i| &train[i]).collect();
            total += train_step(&mut model, &mut opt, &batch, cfg, &mut rng)?.loss;
            steps += 1;
        }
        let (val_mse, val_mae) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let s = evaluate(&model, val, &eval_cfg)?;
            (s.mse, s.mae)
        };
        let rec = EpochRecord {
            epoch,
            train_loss: total / steps as f64,
            val_mse,
            val_mae,
        };
        on_epoch(&rec);
        history.push(rec);
        if !val.is_empty() && best.as_ref().is_none_or(|(m, _, _)| val_mse < *m) {
            best = Some((val_mse, epoch, model.clone()));
        }
    }
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (cfg.epochs, model.clone()),
    };
    Ok(FitOutcome {
        best,
        best_epoch,
        last: model,
        optimizer: opt,
        history,
    })
}

/// `epoch,train_loss,val_mse,val_mae` with shortest round-trip floats.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_mse,val_mae\n");
    for r in history {
        let _ = writeln!(s, "{},{:?},{:?},{:?}", r.epoch, r.train_loss, r.val_mse, r.val_mae);
    }
    s
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}
