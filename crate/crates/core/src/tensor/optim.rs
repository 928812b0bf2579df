use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("adam: lr must be > 0, got {lr}")));
        }
        let zeros = |t: &Tensor| vec![0.0; t.len()];
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.tensors().iter().map(zeros).collect(),
            second: params.tensors().iter().map(zeros).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Rebuilds a state from stored moments.
    pub fn from_parts(
        lr: f64,
        step: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if first.len() != second.len()
            || first.iter().zip(&second).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::InvalidArgument("adam: moment buffers disagree".into()));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            first,
            second,
        })
    }

    /// One Adam update. Every parameter must have a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let g = g.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("adam: missing gradient for '{}'", params.name(i)))
            })?;
            if g.shape() != params.get(i).shape() || self.first[i].len() != g.len() {
                return Err(Error::shape("adam", params.get(i).shape(), g.shape()));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let g = g.as_ref().expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let p = params.get_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(Tensor::sq_norm)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
