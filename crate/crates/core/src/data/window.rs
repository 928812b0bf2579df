use std::ops::Range;

use crate::data::{build_context_tokens, split, ContextBins, ContextMode, Dataset, SplitMode, Splits, DEFAULT_BINS};
use crate::error::{Error, Result};

/// Lower bound on the look-back std used for normalization.
pub const STD_FLOOR: f64 = 1e-6;

/// One normalized training or evaluation instance for a single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub x_hist: Vec<f64>,
    /// Targets scaled with the look-back statistics.
    pub y_true: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// True when the look-back std was below [`STD_FLOOR`].
    pub clamped: bool,
    pub context: Vec<usize>,
    pub dataset_id: usize,
    pub channel: usize,
    /// Row of the first look-back step.
    pub origin: usize,
}

impl WindowPair {
    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| v * self.std + self.mean).collect()
    }

    pub fn raw_target(&self) -> Vec<f64> {
        self.denormalize(&self.y_true)
    }

    pub fn raw_history(&self) -> Vec<f64> {
        self.denormalize(&self.x_hist)
    }
}

/// Windowing and context settings shared by every split.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub look_back: usize,
    pub horizon: usize,
    /// Step between training window origins.
    pub stride: usize,
    /// Step between validation and test window origins.
    pub eval_stride: usize,
    pub split: SplitMode,
    pub context: ContextMode,
    pub n_bins: usize,
    pub dataset_id: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            look_back: 96,
            horizon: 48,
            stride: 1,
            eval_stride: 1,
            split: SplitMode::default(),
            context: ContextMode::Full,
            n_bins: DEFAULT_BINS,
            dataset_id: 0,
        }
    }
}

/// Windows for every channel in `rows`. Channels are emitted one after
/// another, each in origin order.
pub fn make_windows(
    ds: &Dataset,
    rows: Range<usize>,
    cfg: &DataConfig,
    stride: usize,
    bins: Option<&ContextBins>,
) -> Result<Vec<WindowPair>> {
    let (l, h) = (cfg.look_back, cfg.horizon);
    if l == 0 || h == 0 || stride == 0 {
        return Err(Error::InvalidArgument("look_back, horizon and stride must be >= 1".into()));
    }
    if rows.end > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "rows {rows:?} exceed dataset length {}",
            ds.len()
        )));
    }
    let mut out = Vec::new();
    for channel in 0..ds.channels() {
        let mut origin = rows.start;
        while origin + l + h <= rows.end {
            let raw = ds.channel(channel, origin..origin + l + h);
            out.push(normalize_window(&raw, l, cfg, bins, channel, origin)?);
            origin += stride;
        }
    }
    Ok(out)
}

/// Scales `raw` (look-back followed by any number of future steps) with the
/// look-back mean and std and attaches context tokens. An empty future gives
/// a forecast-only window.
pub fn normalize_window(
    raw: &[f64],
    look_back: usize,
    cfg: &DataConfig,
    bins: Option<&ContextBins>,
    channel: usize,
    origin: usize,
) -> Result<WindowPair> {
    if look_back == 0 || raw.len() < look_back {
        return Err(Error::Data(format!(
            "window needs {look_back} look-back values, got {}",
            raw.len()
        )));
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value at window offset {i}")));
    }
    let (hist, fut) = raw.split_at(look_back);
    let l = look_back as f64;
    let mean = hist.iter().sum::<f64>() / l;
    let var = hist.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / l;
    let clamped = var.sqrt() < STD_FLOOR;
    let std = if clamped { STD_FLOOR } else { var.sqrt() };
    Ok(WindowPair {
        x_hist: hist.iter().map(|v| (v - mean) / std).collect(),
        y_true: fut.iter().map(|v| (v - mean) / std).collect(),
        mean,
        std,
        clamped,
        context: build_context_tokens(bins, hist, cfg.dataset_id, cfg.context)?,
        dataset_id: cfg.dataset_id,
        channel,
        origin,
    })
}

/// Interleaves several window streams one instance at a time.
pub fn pool_round_robin(streams: Vec<Vec<WindowPair>>) -> Vec<WindowPair> {
    let total = streams.iter().map(Vec::len).sum();
    let mut iters: Vec<_> = streams.into_iter().map(Vec::into_iter).collect();
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        for it in iters.iter_mut() {
            if let Some(w) = it.next() {
                out.push(w);
            }
        }
    }
    out
}

/// Split, fitted context bins, and windows for one dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splits: Splits,
    pub bins: Option<ContextBins>,
    pub train: Vec<WindowPair>,
    pub val: Vec<WindowPair>,
    pub test: Vec<WindowPair>,
}

/// Splits `ds`, fits statistic bins on the training look-backs, and builds
/// windows for each segment.
pub fn prepare(ds: &Dataset, cfg: &DataConfig) -> Result<Prepared> {
    let splits = split(ds.len(), cfg.split, cfg.look_back, cfg.horizon)?;
    let bins = match cfg.context {
        ContextMode::Full | ContextMode::NoDomain => {
            let r = splits.train.clone();
            let mut looks = Vec::new();
            for c in 0..ds.channels() {
                let mut o = r.start;
                while o + cfg.look_back + cfg.horizon <= r.end {
                    looks.push(ds.channel(c, o..o + cfg.look_back));
                    o += cfg.stride.max(1);
                }
            }
            Some(ContextBins::fit(looks.iter().map(Vec::as_slice), cfg.n_bins)?)
        }
        _ => None,
    };
    let train = make_windows(ds, splits.train.clone(), cfg, cfg.stride, bins.as_ref())?;
    let val = make_windows(ds, splits.val.clone(), cfg, cfg.eval_stride, bins.as_ref())?;
    let test = make_windows(ds, splits.test.clone(), cfg, cfg.eval_stride, bins.as_ref())?;
    Ok(Prepared {
        splits,
        bins,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, window_count, SynthKind};
    use proptest::prelude::*;

    fn cfg(l: usize, h: usize) -> DataConfig {
        DataConfig {
            look_back: l,
            horizon: h,
            context: ContextMode::NoText,
            ..DataConfig::default()
        }
    }

    fn multichannel(rows: usize, cols: usize) -> Dataset {
        let v = (0..rows * cols).map(|i| ((i * 37 % 101) as f64).sin() * (1 + i % cols) as f64).collect();
        Dataset::new("m", rows, cols, v).unwrap()
    }

    #[test]
    fn history_is_standardized() {
        let d = synth_generate(SynthKind::TrendSine, 400, 0.2, 1).unwrap();
        let w = make_windows(&d, 0..400, &cfg(24, 8), 1, None).unwrap();
        assert_eq!(w.len(), 400 - 24 - 8 + 1);
        for p in &w {
            let m = p.x_hist.iter().sum::<f64>() / 24.0;
            let v = p.x_hist.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 24.0;
            assert!(m.abs() < 1e-9 && (v.sqrt() - 1.0).abs() < 1e-9);
            assert!(!p.clamped);
        }
    }

    #[test]
    fn targets_use_history_statistics() {
        let d = Dataset::univariate("u", vec![0.0, 2.0, 0.0, 2.0, 5.0, 7.0]).unwrap();
        let w = make_windows(&d, 0..6, &cfg(4, 2), 1, None).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!((w[0].mean, w[0].std), (1.0, 1.0));
        assert_eq!(w[0].y_true, vec![4.0, 6.0]);
        assert_eq!(w[0].raw_target(), vec![5.0, 7.0]);
    }

    #[test]
    fn constant_history_is_clamped() {
        let d = Dataset::univariate("c", vec![3.0; 10]).unwrap();
        let w = make_windows(&d, 0..10, &cfg(4, 2), 1, None).unwrap();
        assert!(w.iter().all(|p| p.clamped && p.std == STD_FLOOR));
        assert!(w.iter().all(|p| p.x_hist.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn channels_multiply_window_count() {
        let d = multichannel(60, 7);
        let w = make_windows(&d, 0..60, &cfg(8, 4), 1, None).unwrap();
        assert_eq!(w.len(), 7 * window_count(60, 8, 4, 1));
        // Each channel forms one contiguous block in origin order.
        for (i, p) in w.iter().enumerate() {
            let per = window_count(60, 8, 4, 1);
            assert_eq!(p.channel, i / per);
            assert_eq!(p.origin, i % per);
        }
    }

    #[test]
    fn horizon_stride_gives_disjoint_targets() {
        let d = multichannel(100, 1);
        let w = make_windows(&d, 0..100, &cfg(8, 4), 4, None).unwrap();
        for pair in w.windows(2) {
            assert_eq!(pair[1].origin - pair[0].origin, 4);
        }
    }

    #[test]
    fn prepare_fits_bins_on_train_only() {
        let d = synth_generate(SynthKind::TrendSine, 1000, 0.1, 2).unwrap();
        let c = DataConfig {
            look_back: 24,
            horizon: 8,
            ..DataConfig::default()
        };
        let p = prepare(&d, &c).unwrap();
        assert_eq!(p.train.len(), window_count(700, 24, 8, 1));
        assert!(p.train.iter().all(|w| w.context.len() == 6));
        // Rising trend pushes later windows into the top mean bin.
        let top = crate::data::MAX_DATASETS + DEFAULT_BINS - 1;
        assert!(p.test.iter().all(|w| w.context[1] == top));
        assert!(p.test.iter().all(|w| w.origin + 24 >= 800));
    }

    #[test]
    fn round_robin_interleaves() {
        let d = multichannel(30, 1);
        let a = make_windows(&d, 0..20, &cfg(4, 2), 1, None).unwrap();
        let mut c2 = cfg(4, 2);
        c2.dataset_id = 1;
        let b = make_windows(&d, 0..10, &c2, 1, None).unwrap();
        let (na, nb) = (a.len(), b.len());
        let p = pool_round_robin(vec![a, b]);
        assert_eq!(p.len(), na + nb);
        assert_eq!(p[0].dataset_id, 0);
        assert_eq!(p[1].dataset_id, 1);
        assert_eq!(p.last().unwrap().dataset_id, 0);
    }

    proptest! {
        #[test]
        fn denormalize_inverts(values in prop::collection::vec(-100.0f64..100.0, 12)) {
            let d = Dataset::univariate("p", values.clone()).unwrap();
            let w = make_windows(&d, 0..12, &cfg(8, 4), 1, None).unwrap();
            if !w[0].clamped {
                for (a, b) in w[0].raw_history().iter().zip(&values[..8]) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
                for (a, b) in w[0].raw_target().iter().zip(&values[8..]) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn emitted_count_matches_formula(len in 10usize..120, l in 1usize..20, h in 1usize..10, stride in 1usize..9, ch in 1usize..4) {
            let d = multichannel(len, ch);
            let w = make_windows(&d, 0..len, &cfg(l, h), stride, None).unwrap();
            prop_assert_eq!(w.len(), ch * window_count(len, l, h, stride));
        }
    }
}
