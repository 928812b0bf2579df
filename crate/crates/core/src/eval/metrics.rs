use crate::error::{Error, Result};
use crate::eval::ForecastResult;

/// Mean squared and mean absolute error.
pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "metrics: prediction has {} steps, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let (se, ae) = pred.iter().zip(truth).fold((0.0, 0.0), |(se, ae), (p, t)| {
        let d = p - t;
        (se + d * d, ae + d.abs())
    });
    Ok((se / n, ae / n))
}

/// Fewest trajectories for which band coverage is reported.
pub const MIN_INTERVAL_SAMPLES: usize = 20;

/// Fractions of truth points inside the 50% and 80% bands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub band50: f64,
    pub band80: f64,
}

/// Coverage of the central 50% (q25..q75) and 80% (q10..q90) bands.
pub fn interval_coverage(result: &ForecastResult, truth: &[f64]) -> Result<Coverage> {
    if result.samples() < MIN_INTERVAL_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "interval coverage needs at least {MIN_INTERVAL_SAMPLES} trajectories, got {}",
            result.samples()
        )));
    }
    let (hits50, hits80) = band_hits(result, truth)?;
    let n = truth.len() as f64;
    Ok(Coverage {
        band50: hits50 as f64 / n,
        band80: hits80 as f64 / n,
    })
}

/// Raw hit counts for the two bands.
pub fn band_hits(result: &ForecastResult, truth: &[f64]) -> Result<(usize, usize)> {
    if truth.len() != result.horizon() {
        return Err(Error::InvalidArgument(format!(
            "coverage: forecast has {} steps, truth has {}",
            result.horizon(),
            truth.len()
        )));
    }
    let mut h50 = 0;
    let mut h80 = 0;
    for (j, y) in truth.iter().enumerate() {
        h50 += usize::from(result.q25[j] <= *y && *y <= result.q75[j]);
        h80 += usize::from(result.q10[j] <= *y && *y <= result.q90[j]);
    }
    Ok((h50, h80))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_arithmetic() {
        assert_eq!(metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert_eq!(metrics(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).unwrap(), (1.0, 1.0));
        assert_eq!(metrics(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), (1.0, 1.0));
        assert!(metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn spread(s: usize) -> ForecastResult {
        let traj = (0..s).map(|i| vec![i as f64, -(i as f64)]).collect();
        ForecastResult::from_trajectories(traj, 1, 0).unwrap()
    }

    #[test]
    fn truth_on_mean_path_is_always_covered() {
        let r = spread(40);
        let truth = r.mean.clone();
        let c = interval_coverage(&r, &truth).unwrap();
        assert_eq!((c.band50, c.band80), (1.0, 1.0));
    }

    #[test]
    fn far_truth_is_never_covered() {
        let r = spread(40);
        let c = interval_coverage(&r, &[1e6, -1e6]).unwrap();
        assert_eq!((c.band50, c.band80), (0.0, 0.0));
    }

    #[test]
    fn too_few_samples_is_an_error() {
        assert!(interval_coverage(&spread(19), &[0.0, 0.0]).is_err());
    }
}
