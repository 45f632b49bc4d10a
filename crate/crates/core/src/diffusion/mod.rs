//! Noise schedule and the closed-form Gaussian machinery of the forward and
//! reverse chains.
//!
//! The forward chain uses per-step variances `beta[t]`, `t = 1..=T`, with
//! cumulative products `alpha_bar[t]` and `alpha_bar[0] = 1`. Learned
//! reverse steps jump `k` fine steps at a time; a jump ending at `t` has
//! `alpha_span = alpha_bar[t] / alpha_bar[t - k]` and
//! `beta_span = 1 - alpha_span`, which makes a single span exactly equal to
//! `k` consecutive fine steps.

mod sampling;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

pub use sampling::{reverse_sample, Denoiser};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffusionError {
    #[error("invalid schedule parameter `{param}`: {msg}")]
    InvalidSchedule { param: &'static str, msg: String },
    #[error("step {t} outside 1..={total}")]
    StepOutOfRange { t: usize, total: usize },
    #[error("step {t} is not a positive multiple of the span size {span}")]
    NotSpanMultiple { t: usize, span: usize },
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("non-finite values at reverse step t={step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("denoiser failed at step t={step}: {msg}")]
    Denoiser { step: usize, msg: String },
}

/// Default variance bounds for the reverse kernel, as fractions of `beta_span`.
pub const DEFAULT_VAR_FLOOR_FRAC: f64 = 1e-4;
pub const DEFAULT_VAR_CEILING_FRAC: f64 = 1.0;

/// The scalars a [`NoiseSchedule`] is built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub total_steps: usize,
    pub span: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub var_floor_frac: f64,
    pub var_ceiling_frac: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            span: 250,
            beta_min: 1e-4,
            beta_max: 0.02,
            var_floor_frac: DEFAULT_VAR_FLOOR_FRAC,
            var_ceiling_frac: DEFAULT_VAR_CEILING_FRAC,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        NoiseSchedule::linear(self.total_steps, self.span, self.beta_min, self.beta_max)?.with_variance_bounds(self.var_floor_frac, self.var_ceiling_frac)
    }
}

/// Linear variance schedule with a fixed span size.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    total_steps: usize,
    span: usize,
    beta_min: f64,
    beta_max: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    var_floor_frac: f64,
    var_ceiling_frac: f64,
}

/// Coefficients of one `k`-sized jump ending at fine step `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanCoefficients {
    pub t: usize,
    pub alpha_span: f64,
    pub beta_span: f64,
    pub posterior_mean_coeff_x0: f64,
    pub posterior_mean_coeff_xt: f64,
    /// Posterior variance after clamping to the configured bounds.
    pub posterior_variance: f64,
    pub unclamped_variance: f64,
    pub variance_floor: f64,
    pub variance_ceiling: f64,
}

/// Builds a linear `beta` ramp from `beta_min` to `beta_max` over `total_steps`.
pub fn make_schedule(total_steps: usize, span: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule, DiffusionError> {
    NoiseSchedule::linear(total_steps, span, beta_min, beta_max)
}

impl NoiseSchedule {
    pub fn linear(total_steps: usize, span: usize, beta_min: f64, beta_max: f64) -> Result<Self, DiffusionError> {
        let bad = |param, msg: String| Err(DiffusionError::InvalidSchedule { param, msg });
        if total_steps == 0 {
            return bad("total_steps", "must be positive".into());
        }
        if span == 0 || !total_steps.is_multiple_of(span) {
            return bad("span", format!("{span} must be positive and divide total_steps={total_steps}"));
        }
        if !(beta_min > 0.0 && beta_min < 1.0) {
            return bad("beta_min", format!("{beta_min} must lie in (0, 1)"));
        }
        if !(beta_max >= beta_min && beta_max < 1.0) {
            return bad("beta_max", format!("{beta_max} must lie in [beta_min, 1)"));
        }
        let beta: Vec<f64> = if total_steps == 1 {
            vec![beta_min]
        } else {
            let denom = (total_steps - 1) as f64;
            (0..total_steps).map(|i| beta_min + (beta_max - beta_min) * i as f64 / denom).collect()
        };
        let mut alpha_bar = Vec::with_capacity(total_steps);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self {
            total_steps,
            span,
            beta_min,
            beta_max,
            beta,
            alpha_bar,
            var_floor_frac: DEFAULT_VAR_FLOOR_FRAC,
            var_ceiling_frac: DEFAULT_VAR_CEILING_FRAC,
        })
    }

    /// Sets the reverse-variance bounds as fractions of each span's `beta_span`.
    pub fn with_variance_bounds(mut self, floor_frac: f64, ceiling_frac: f64) -> Result<Self, DiffusionError> {
        if !(floor_frac > 0.0 && floor_frac <= ceiling_frac && ceiling_frac.is_finite()) {
            return Err(DiffusionError::InvalidSchedule {
                param: "var_floor_frac",
                msg: format!("need 0 < floor ({floor_frac}) <= ceiling ({ceiling_frac})"),
            });
        }
        self.var_floor_frac = floor_frac;
        self.var_ceiling_frac = ceiling_frac;
        Ok(self)
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            total_steps: self.total_steps,
            span: self.span,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            var_floor_frac: self.var_floor_frac,
            var_ceiling_frac: self.var_ceiling_frac,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn span(&self) -> usize {
        self.span
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn var_floor_frac(&self) -> f64 {
        self.var_floor_frac
    }

    pub fn var_ceiling_frac(&self) -> f64 {
        self.var_ceiling_frac
    }

    /// Number of learned reverse steps, `T / k`.
    pub fn reverse_steps(&self) -> usize {
        self.total_steps / self.span
    }

    /// Reverse visiting order `T, T - k, ..., k`.
    pub fn reverse_timesteps(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.reverse_steps()).rev().map(move |i| i * self.span)
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `beta[t]` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64, DiffusionError> {
        self.check_step(t)?;
        Ok(self.beta[t - 1])
    }

    /// `alpha_bar[t]` for `t` in `0..=T`, with `alpha_bar[0] = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.total_steps {
            return Err(DiffusionError::StepOutOfRange { t, total: self.total_steps });
        }
        Ok(())
    }

    fn check_span_step(&self, t: usize) -> Result<(), DiffusionError> {
        self.check_step(t)?;
        if !t.is_multiple_of(self.span) {
            return Err(DiffusionError::NotSpanMultiple { t, span: self.span });
        }
        Ok(())
    }

    pub fn span_coefficients(&self, t: usize) -> Result<SpanCoefficients, DiffusionError> {
        self.check_span_step(t)?;
        let ab_t = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar(t - self.span)?;
        let alpha_span = ab_t / ab_prev;
        let beta_span = 1.0 - alpha_span;
        let denom = 1.0 - ab_t;
        let coeff_x0 = ab_prev.sqrt() * beta_span / denom;
        let coeff_xt = alpha_span.sqrt() * (1.0 - ab_prev) / denom;
        let unclamped = beta_span * (1.0 - ab_prev) / denom;
        let floor = self.var_floor_frac * beta_span;
        let ceiling = self.var_ceiling_frac * beta_span;
        Ok(SpanCoefficients {
            t,
            alpha_span,
            beta_span,
            posterior_mean_coeff_x0: coeff_x0,
            posterior_mean_coeff_xt: coeff_xt,
            posterior_variance: unclamped.clamp(floor, ceiling),
            unclamped_variance: unclamped,
            variance_floor: floor,
            variance_ceiling: ceiling,
        })
    }
}

fn affine<F: Scalar>(a: &Tensor<F>, ca: f64, b: &Tensor<F>, cb: f64) -> Result<Tensor<F>, DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::ShapeMismatch {
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ca, cb) = (F::from_f64_lossy(ca), F::from_f64_lossy(cb));
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| ca * x + cb * y).collect();
    Ok(Tensor::from_vec(a.shape(), data)?)
}

/// Samples `q(x_t | x_0)`: `sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps`.
pub fn forward_marginal<F: Scalar>(x0: &Tensor<F>, t: usize, eps: &Tensor<F>, sched: &NoiseSchedule) -> Result<Tensor<F>, DiffusionError> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t)?;
    affine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// One `k`-sized forward jump from fine step `t - k` to `t`.
pub fn forward_span<F: Scalar>(x_prev: &Tensor<F>, t: usize, eps: &Tensor<F>, sched: &NoiseSchedule) -> Result<Tensor<F>, DiffusionError> {
    let c = sched.span_coefficients(t)?;
    affine(x_prev, c.alpha_span.sqrt(), eps, c.beta_span.sqrt())
}

/// Gaussian `q(x_{t-k} | x_t, x0)` evaluated at the estimate `x0_hat`;
/// returns the mean and the clamped variance.
pub fn posterior<F: Scalar>(x0_hat: &Tensor<F>, x_t: &Tensor<F>, t: usize, sched: &NoiseSchedule) -> Result<(Tensor<F>, f64), DiffusionError> {
    let c = sched.span_coefficients(t)?;
    let mean = affine(x0_hat, c.posterior_mean_coeff_x0, x_t, c.posterior_mean_coeff_xt)?;
    Ok((mean, c.posterior_variance))
}
