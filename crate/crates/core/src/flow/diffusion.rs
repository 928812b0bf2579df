use std::f64::consts::PI;

use rand::Rng;

use crate::error::Result;
use crate::flow::{gaussian_like, VelocityField};
use crate::tensor::Tensor;

/// Bound on the clean-signal estimate during sampling (normalized units).
pub const X0_CLIP: f64 = 5.0;

/// Discrete DDPM schedule with cosine cumulative signal level.
///
/// Step `k = 0` is the least noisy. The network sees the flow-style time
/// `1 - (k + 1) / K`, so larger times mean cleaner inputs in every head.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
}

impl DiffusionSchedule {
    pub const DEFAULT_STEPS: usize = 50;

    pub fn cosine(steps: usize) -> Self {
        assert!(steps >= 1, "diffusion needs at least one step");
        let s = 0.008;
        let f = |k: usize| (((k as f64 / steps as f64) + s) / (1.0 + s) * PI / 2.0).cos().powi(2);
        let f0 = f(0);
        let alpha_bar: Vec<f64> = (1..=steps).map(|k| f(k) / f0).collect();
        let mut beta = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &ab in &alpha_bar {
            beta.push((1.0 - ab / prev).min(0.999));
            prev = ab;
        }
        // Re-derive alpha_bar from the clipped betas so the two stay consistent.
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { alpha_bar, beta }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k]
    }

    pub fn time_of(&self, k: usize) -> f64 {
        1.0 - (k + 1) as f64 / self.steps() as f64
    }

    /// sqrt(abar_k) y + sqrt(1 - abar_k) noise.
    pub fn noise(&self, y: &Tensor, noise: &Tensor, k: usize) -> Tensor {
        let ab = self.alpha_bar[k];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = y.data().iter().zip(noise.data()).map(|(yv, e)| a * yv + b * e).collect();
        Tensor::new(y.shape().to_vec(), data).expect("same shape")
    }

    /// Ancestral sampling from pure noise; `eps_model` predicts the noise.
    ///
    /// Each step forms the clean estimate from the predicted noise, clips it
    /// to `[-X0_CLIP, X0_CLIP]`, and draws from the Gaussian posterior
    /// q(x_(k-1) | x_k, x0).
    pub fn sample<R: Rng + ?Sized>(
        &self,
        eps_model: &dyn VelocityField,
        shape: &[usize],
        rng: &mut R,
    ) -> Result<Tensor> {
        let mut x = gaussian_like(shape, rng);
        for k in (0..self.steps()).rev() {
            let t = self.time_of(k);
            let eps = eps_model.velocity(&x, t, t)?;
            let beta = self.beta[k];
            let ab = self.alpha_bar[k];
            let ab_prev = if k > 0 { self.alpha_bar[k - 1] } else { 1.0 };
            let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let c_xt = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let mut next: Vec<f64> = x
                .data()
                .iter()
                .zip(eps.data())
                .map(|(xv, e)| {
                    let x0 = ((xv - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-X0_CLIP, X0_CLIP);
                    c_x0 * x0 + c_xt * xv
                })
                .collect();
            if k > 0 {
                let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
                let z = gaussian_like(shape, rng);
                next.iter_mut().zip(z.data()).for_each(|(v, zv)| *v += sigma * zv);
            }
            x = Tensor::new(shape.to_vec(), next)?;
        }
        Ok(x)
    }
}
