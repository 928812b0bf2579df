//! Central finite-difference checks against tape gradients.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Settings for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            floor: 1e-6,
        }
    }
}

impl GradCheck {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, element index) of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Relative error with a denominator floor.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares tape gradients of the scalar function `f` at `point` with
/// central differences, element by element over every input tensor.
pub fn grad_check<F>(f: F, point: &[Tensor], cfg: GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t, false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.param(t, true)).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(point)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    let mut probe = point.to_vec();
    for (ti, t) in point.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.data()[j];
            probe[ti].data_mut()[j] = orig + cfg.step;
            let up = eval(&probe)?;
            probe[ti].data_mut()[j] = orig - cfg.step;
            let down = eval(&probe)?;
            probe[ti].data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[ti].data()[j];
            let abs = (a - numeric).abs();
            let rel = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if !rel.is_finite() || !abs.is_finite() {
                report.passed = false;
                report.max_rel_err = f64::INFINITY;
                report.worst = Some((ti, j));
                continue;
            }
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, j));
            }
        }
    }
    report.passed &= report.max_rel_err < cfg.tolerance;
    Ok(report)
}
