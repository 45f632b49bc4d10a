use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{posterior, DiffusionError, NoiseSchedule};
use crate::tensor::{Scalar, Tensor};

/// A network that estimates the clean image from a noisy one.
pub trait Denoiser<F: Scalar> {
    /// Length of the per-sample latent vector.
    fn latent_dim(&self) -> usize;

    /// `x_t` is `[n, 1, h, w]`, `guide` is `[n, c, h, w]` and `z` is
    /// `[n, latent_dim]`.
    fn predict_x0(&self, x_t: &Tensor<F>, guide: &Tensor<F>, t: usize, z: &Tensor<F>) -> Result<Tensor<F>, String>;
}

pub(crate) fn normal_tensor<F: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
    Tensor::randn(shape, 1.0, rng)
}

/// Runs the learned reverse chain from pure noise down to an image.
///
/// Starts from `x_T ~ N(0, I)`; at each `t = T, T-k, ..., k` the denoiser
/// estimates `x0`, and the next state is drawn from the posterior at that
/// estimate. The last step returns the posterior mean without noise. Output
/// is clamped to `[-1, 1]`.
pub fn reverse_sample<F: Scalar, D: Denoiser<F> + ?Sized>(
    gen: &D,
    guide: &Tensor<F>,
    rng_seed: u64,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>, DiffusionError> {
    let gs = guide.shape();
    if gs.len() != 4 {
        return Err(DiffusionError::ShapeMismatch {
            lhs: gs.to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    let shape = [gs[0], 1, gs[2], gs[3]];
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut x_t: Tensor<F> = normal_tensor(&shape, &mut rng);
    let latent = [shape[0], gen.latent_dim()];
    for t in sched.reverse_timesteps() {
        let z = normal_tensor(&latent, &mut rng);
        let x0_hat = gen.predict_x0(&x_t, guide, t, &z).map_err(|msg| DiffusionError::Denoiser { step: t, msg })?;
        if !x0_hat.is_finite() {
            return Err(DiffusionError::NonFinite { step: t });
        }
        let (mean, var) = posterior(&x0_hat, &x_t, t, sched)?;
        x_t = if t == sched.span() {
            mean
        } else {
            let sd = F::from_f64_lossy(var.sqrt());
            let mut next = mean;
            for v in next.data_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v = *v + sd * F::from_f64_lossy(e);
            }
            next
        };
        if !x_t.is_finite() {
            return Err(DiffusionError::NonFinite { step: t });
        }
    }
    let (lo, hi) = (-F::one(), F::one());
    for v in x_t.data_mut() {
        *v = v.max(lo).min(hi);
    }
    Ok(x_t)
}
