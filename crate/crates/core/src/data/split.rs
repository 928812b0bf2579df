use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How a series is cut into train, validation and test segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitMode {
    /// Chronological fractions of the series.
    Ratio { train: f64, val: f64, test: f64 },
    /// Step counts per segment.
    Counts { train: usize, val: usize, test: usize },
    /// The whole series is the training segment.
    Single,
}

impl Default for SplitMode {
    fn default() -> Self {
        SplitMode::Ratio {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitMode::Ratio { train, val, test } => write!(f, "ratio:{train}/{val}/{test}"),
            SplitMode::Counts { train, val, test } => write!(f, "counts:{train}/{val}/{test}"),
            SplitMode::Single => write!(f, "single"),
        }
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "single" {
            return Ok(SplitMode::Single);
        }
        let bad = || Error::Config(format!("split '{s}': expected ratio:a/b/c, counts:a/b/c or single"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let parts: Vec<&str> = rest.split('/').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        match kind {
            "ratio" => {
                let v: Vec<f64> = parts.iter().map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                if v.iter().any(|x| !(0.0..=1.0).contains(x)) || v.iter().sum::<f64>() > 1.0 + 1e-9 {
                    return Err(Error::Config(format!("split '{s}': fractions must lie in [0,1] and sum to at most 1")));
                }
                Ok(SplitMode::Ratio { train: v[0], val: v[1], test: v[2] })
            }
            "counts" => {
                let v: Vec<usize> = parts.iter().map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                Ok(SplitMode::Counts { train: v[0], val: v[1], test: v[2] })
            }
            _ => Err(bad()),
        }
    }
}

/// Row ranges of each segment. Validation and test ranges start `look_back`
/// steps before their segment so that their first window can forecast the
/// segment's first step; every target step belongs to exactly one segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Sliding windows of `look_back + horizon` steps that fit in `len` steps.
pub fn window_count(len: usize, look_back: usize, horizon: usize, stride: usize) -> usize {
    let need = look_back + horizon;
    if stride == 0 || len < need {
        0
    } else {
        (len - need) / stride + 1
    }
}

/// Cuts `len` steps into chronological segments and checks that each
/// non-empty segment holds at least one window.
pub fn split(len: usize, mode: SplitMode, look_back: usize, horizon: usize) -> Result<Splits> {
    if look_back == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("look_back and horizon must be >= 1".into()));
    }
    let (a, b, c) = match mode {
        SplitMode::Single => (len, len, len),
        SplitMode::Ratio { train, val, test } => {
            if train < 0.0 || val < 0.0 || test < 0.0 || train + val + test > 1.0 + 1e-9 {
                return Err(Error::Config(format!("invalid split ratios {train}/{val}/{test}")));
            }
            let a = (len as f64 * train).round() as usize;
            let b = (len as f64 * (train + val)).round() as usize;
            let c = ((len as f64 * (train + val + test)).round() as usize).min(len);
            (a, b, c)
        }
        SplitMode::Counts { train, val, test } => {
            if train + val + test > len {
                return Err(Error::Data(format!(
                    "split counts {train}+{val}+{test} exceed series length {len}"
                )));
            }
            (train, train + val, train + val + test)
        }
    };
    let borrow = |start: usize, end: usize| {
        if end == start {
            start..start
        } else {
            start.saturating_sub(look_back)..end
        }
    };
    let splits = Splits {
        train: 0..a,
        val: borrow(a, b),
        test: borrow(b, c),
    };
    for (name, r) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if !r.is_empty() && window_count(r.len(), look_back, horizon, 1) == 0 {
            return Err(Error::Data(format!(
                "{name} split has {} steps, fewer than look_back + horizon = {}",
                r.len(),
                look_back + horizon
            )));
        }
    }
    if splits.train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(s: &Splits, l: usize, h: usize) -> [usize; 3] {
        [&s.train, &s.val, &s.test].map(|r| window_count(r.len(), l, h, 1))
    }

    #[test]
    fn ratio_split_window_arithmetic() {
        let s = split(1000, SplitMode::default(), 96, 48).unwrap();
        assert_eq!(s.train, 0..700);
        assert_eq!(s.val, 604..800);
        assert_eq!(counts(&s, 96, 48), [557, 53, 153]);
    }

    #[test]
    fn hourly_benchmark_counts() {
        // 12/4/4 months of hourly data with the table's per-split window counts.
        let s = split(17420, SplitMode::Counts { train: 8640, val: 2880, test: 2880 }, 336, 12).unwrap();
        assert_eq!(counts(&s, 336, 12), [8293, 2869, 2869]);
    }

    #[test]
    fn degenerate_series_has_one_window() {
        let s = split(144, SplitMode::Single, 96, 48).unwrap();
        assert_eq!(counts(&s, 96, 48), [1, 0, 0]);
        assert!(split(143, SplitMode::Single, 96, 48).is_err());
    }

    #[test]
    fn short_split_is_an_error() {
        let err = split(150, SplitMode::default(), 96, 48).unwrap_err();
        assert!(err.to_string().contains("split"), "{err}");
    }

    #[test]
    fn parse_modes() {
        assert_eq!("single".parse::<SplitMode>().unwrap(), SplitMode::Single);
        assert_eq!(
            "counts:10/2/3".parse::<SplitMode>().unwrap(),
            SplitMode::Counts { train: 10, val: 2, test: 3 }
        );
        let m: SplitMode = "ratio:0.6/0.2/0.2".parse().unwrap();
        assert_eq!(m.to_string().parse::<SplitMode>().unwrap(), m);
        assert!("ratio:0.9/0.2/0.2".parse::<SplitMode>().is_err());
        assert!("thirds".parse::<SplitMode>().is_err());
    }

    fn brute_force(len: usize, l: usize, h: usize, stride: usize) -> usize {
        let mut n = 0;
        let mut origin = 0;
        while origin + l + h <= len {
            n += 1;
            origin += stride;
        }
        n
    }

    proptest! {
        #[test]
        fn window_count_matches_enumeration(len in 0usize..300, l in 1usize..40, h in 1usize..40, stride in 1usize..20) {
            prop_assert_eq!(window_count(len, l, h, stride), brute_force(len, l, h, stride));
        }

        #[test]
        fn ratio_segments_are_ordered_and_disjoint(len in 200usize..2000) {
            let s = split(len, SplitMode::default(), 8, 4).unwrap();
            prop_assert_eq!(s.train.start, 0);
            prop_assert_eq!(s.train.end, s.val.start + 8);
            prop_assert_eq!(s.val.end, s.test.start + 8);
            prop_assert!(s.test.end <= len);
        }

        #[test]
        fn counts_targets_never_overlap(train in 30usize..100, val in 20usize..50, test in 20usize..50, l in 1usize..15) {
            let s = split(train + val + test, SplitMode::Counts { train, val, test }, l, 4).unwrap();
            // First target step of each segment comes after the previous segment ends.
            prop_assert_eq!(s.val.start + l, train);
            prop_assert_eq!(s.test.start + l, train + val);
        }
    }
}
