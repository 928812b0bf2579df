//! One-step and few-step samplers for the generative heads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{gaussian_like, DiffusionSchedule, HeadKind};
use crate::tensor::Tensor;

/// A network output u(x, t, r) with its conditioning already bound.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64, r: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64, f64) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64, r: f64) -> Result<Tensor> {
        self(x, t, r)
    }
}

fn euler(x: &Tensor, u: &Tensor, dt: f64) -> Result<Tensor> {
    if x.shape() != u.shape() {
        return Err(Error::shape("sampler", x.shape(), u.shape()));
    }
    let data = x.data().iter().zip(u.data()).map(|(a, b)| a + dt * b).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// noise + u(noise, 0, 1): one function evaluation.
pub fn one_step_sample<R: Rng + ?Sized>(
    field: &dyn VelocityField,
    head: HeadKind,
    shape: &[usize],
    rng: &mut R,
) -> Result<Tensor> {
    if head != HeadKind::MeanVelocity {
        return Err(Error::InvalidArgument(format!(
            "one_step_sample needs the mean_velocity head, got '{head}'"
        )));
    }
    let noise = gaussian_like(shape, rng);
    let u = field.velocity(&noise, 0.0, 1.0)?;
    euler(&noise, &u, 1.0)
}

/// Integrates from noise over a uniform grid of `k` intervals.
///
/// The mean-velocity head jumps each interval with u(y, t_i, t_(i+1)); the
/// vanilla head takes Euler steps with u(y, t_i). The diffusion head ignores
/// `k` and runs its full ancestral chain.
pub fn multi_step_sample<R: Rng + ?Sized>(
    field: &dyn VelocityField,
    head: HeadKind,
    k: usize,
    shape: &[usize],
    diffusion: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    if k < 1 {
        return Err(Error::InvalidArgument("multi_step_sample: k must be >= 1".into()));
    }
    match head {
        HeadKind::MeanVelocity | HeadKind::VanillaFm => {
            let mut y = gaussian_like(shape, rng);
            for i in 0..k {
                let t0 = i as f64 / k as f64;
                let t1 = (i + 1) as f64 / k as f64;
                let r = if head == HeadKind::MeanVelocity { t1 } else { t0 };
                let u = field.velocity(&y, t0, r)?;
                y = euler(&y, &u, t1 - t0)?;
            }
            Ok(y)
        }
        HeadKind::Diffusion => diffusion.sample(field, shape, rng),
        HeadKind::Regression => Err(Error::InvalidArgument(
            "multi_step_sample: regression head has nothing to sample".into(),
        )),
    }
}

/// Number of network evaluations a sampler call performs.
pub fn function_evaluations(head: HeadKind, k: usize, diffusion: &DiffusionSchedule) -> usize {
    match head {
        HeadKind::Diffusion => diffusion.steps(),
        HeadKind::Regression => 1,
        _ => k,
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn constant(c: f64) -> impl Fn(&Tensor, f64, f64) -> Result<Tensor> {
        move |x: &Tensor, _t, _r| Ok(Tensor::full(x.shape(), c))
    }

    #[test]
    fn constant_field_adds_constant() {
        let field = constant(0.75);
        let ds = DiffusionSchedule::cosine(50);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let noise = gaussian_like(&[3, 4], &mut b);
        let y = one_step_sample(&field, HeadKind::MeanVelocity, &[3, 4], &mut a).unwrap();
        for (yv, e) in y.data().iter().zip(noise.data()) {
            assert_eq!(*yv, e + 0.75);
        }
        for k in 1..6 {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let y = multi_step_sample(&field, HeadKind::MeanVelocity, k, &[3, 4], &ds, &mut rng).unwrap();
            for (yv, e) in y.data().iter().zip(noise.data()) {
                assert!((yv - (e + 0.75)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_field_returns_noise() {
        let field = constant(0.0);
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let y = one_step_sample(&field, HeadKind::MeanVelocity, &[2, 2], &mut a).unwrap();
        assert_eq!(y, gaussian_like(&[2, 2], &mut b));
    }

    #[test]
    fn k1_equals_one_step_bitwise() {
        let field = |x: &Tensor, t: f64, r: f64| {
            Ok(Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.sin() * (r - t) + t).collect()).unwrap())
        };
        let ds = DiffusionSchedule::cosine(50);
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let one = one_step_sample(&field, HeadKind::MeanVelocity, &[4, 3], &mut a).unwrap();
        let multi = multi_step_sample(&field, HeadKind::MeanVelocity, 1, &[4, 3], &ds, &mut b).unwrap();
        assert!(one.data().iter().zip(multi.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn errors() {
        let field = constant(0.0);
        let ds = DiffusionSchedule::cosine(50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(one_step_sample(&field, HeadKind::Diffusion, &[1, 1], &mut rng).is_err());
        assert!(multi_step_sample(&field, HeadKind::MeanVelocity, 0, &[1, 1], &ds, &mut rng).is_err());
        assert!(multi_step_sample(&field, HeadKind::Regression, 1, &[1, 1], &ds, &mut rng).is_err());
    }
}
