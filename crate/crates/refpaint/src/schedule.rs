//! Variance-preserving noise schedule and the forward / reverse diffusion
//! steps.
//!
//! The schedule stores, per timestep `t`, the signal scale `alpha_t = √ᾱ_t`
//! and the noise scale `sigma_t = √(1 − ᾱ_t)` produced by a linear beta ramp,
//! so `alpha_t² + sigma_t² = 1` holds throughout. Noising is
//! `x_t = alpha_t·x₀ + sigma_t·ε`; the reverse step is the deterministic
//! (eta = 0) or ancestral (eta = 1) update in the ε-parameterization.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Number of reverse steps used when nothing else is configured. The beta
/// ramp endpoints are the classic 1000-step linear ramp (1e-4 … 0.02)
/// rescaled by 1000/T so that the total accumulated noise is preserved and
/// the terminal noise level stays above 0.99.
pub const DEFAULT_T: usize = 200;
const BASE_STEPS: f64 = 1000.0;
const BASE_BETA_MIN: f64 = 1.0e-4;
const BASE_BETA_MAX: f64 = 0.02;

/// Serializable schedule parameters (stored in checkpoints).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleConfig {
    /// Rescaled linear ramp for a given step count (see [`DEFAULT_T`]).
    /// The rescaling keeps `beta_max < 1` only for `t_steps ≥ 21`; smaller
    /// ladders need explicit endpoints.
    pub fn for_steps(t_steps: usize) -> Self {
        let scale = BASE_STEPS / t_steps as f64;
        ScheduleConfig {
            t_steps,
            beta_min: BASE_BETA_MIN * scale,
            beta_max: BASE_BETA_MAX * scale,
        }
    }

    /// Graceful form of the [`build_schedule`] preconditions, for config
    /// surfaces that should error instead of panic.
    pub fn validate(&self) -> Result<(), String> {
        if self.t_steps < 2 {
            return Err(format!("t_steps must be at least 2, got {}", self.t_steps));
        }
        if !(0.0..1.0).contains(&self.beta_min)
            || !(0.0..1.0).contains(&self.beta_max)
            || self.beta_min > self.beta_max
        {
            return Err(format!(
                "beta ramp must satisfy 0 <= beta_min <= beta_max < 1, got [{}, {}] \
                 (t_steps below 21 makes the rescaled default ramp invalid — \
                 set explicit endpoints)",
                self.beta_min, self.beta_max
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> NoiseSchedule {
        build_schedule(self.t_steps, self.beta_min, self.beta_max)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::for_steps(DEFAULT_T)
    }
}

/// Precomputed variance-preserving schedule.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub t_steps: usize,
    pub beta: Vec<f64>,
    /// Signal scale √ᾱ_t per step.
    pub alpha_t: Vec<f64>,
    /// Noise scale √(1 − ᾱ_t) per step.
    pub sigma_t: Vec<f64>,
}

/// Build a schedule from a linear beta ramp.
///
/// Requires `t_steps ≥ 2` and `0 ≤ beta_min ≤ beta_max < 1`. A zero ramp is
/// accepted as the degenerate no-noise schedule (useful in tests); any
/// positive ramp yields strictly decreasing `alpha_t`.
pub fn build_schedule(t_steps: usize, beta_min: f64, beta_max: f64) -> NoiseSchedule {
    assert!(t_steps >= 2, "schedule needs at least two steps");
    assert!(
        (0.0..1.0).contains(&beta_min) && beta_min <= beta_max && beta_max < 1.0,
        "beta ramp must satisfy 0 <= beta_min <= beta_max < 1"
    );
    let mut beta = Vec::with_capacity(t_steps);
    for i in 0..t_steps {
        let frac = i as f64 / (t_steps - 1) as f64;
        beta.push(beta_min + (beta_max - beta_min) * frac);
    }
    let mut alpha_t = Vec::with_capacity(t_steps);
    let mut sigma_t = Vec::with_capacity(t_steps);
    let mut alpha_bar = 1.0;
    for &b in &beta {
        alpha_bar *= 1.0 - b;
        alpha_t.push(alpha_bar.sqrt());
        sigma_t.push((1.0 - alpha_bar).sqrt());
    }
    NoiseSchedule { t_steps, beta, alpha_t, sigma_t }
}

/// Noise a clean image to level `t`: `x_t = alpha_t·x₀ + sigma_t·ε`.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Tensor {
    assert!(t < sched.t_steps, "timestep {t} out of range");
    assert_eq!(x0.shape(), eps.shape(), "noise shape must match image shape");
    let a = sched.alpha_t[t];
    let s = sched.sigma_t[t];
    x0.zip(eps, |x, e| a * x + s * e)
}

/// One reverse step from level `t` to `t − 1` in the ε-parameterization.
///
/// `eta` interpolates between the deterministic update (0) and the ancestral
/// sampler (1); fresh noise is drawn only when `eta > 0` and `t > 0`. At
/// `t = 0` the predicted clean image `x̂₀ = (x_t − sigma_t·ε̂)/alpha_t` is
/// returned directly.
pub fn reverse_step<R: Rng>(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut R,
) -> Tensor {
    assert!(t < sched.t_steps, "timestep {t} out of range");
    assert!((0.0..=1.0).contains(&eta), "eta must lie in [0, 1]");
    assert_eq!(x_t.shape(), eps_hat.shape());
    let a_t = sched.alpha_t[t];
    let s_t = sched.sigma_t[t];
    // Predicted clean image.
    let x0 = x_t.zip(eps_hat, |x, e| (x - s_t * e) / a_t);
    if t == 0 {
        return x0;
    }
    let a_prev = sched.alpha_t[t - 1];
    // In ᾱ terms: variance = (1-ᾱ_prev)/(1-ᾱ_t) · (1 - ᾱ_t/ᾱ_prev).
    let ab_t = a_t * a_t;
    let ab_prev = a_prev * a_prev;
    let variance = ((1.0 - ab_prev) / (1.0 - ab_t)) * (1.0 - ab_t / ab_prev);
    let std = eta * variance.max(0.0).sqrt();
    let dir = (1.0 - ab_prev - std * std).max(0.0).sqrt();
    let mut out = x0.map(|v| a_prev * v);
    out.axpy(dir, eps_hat);
    if eta > 0.0 {
        let noise = Tensor::new(
            x_t.shape().to_vec(),
            (0..x_t.numel()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        );
        out.axpy(std, &noise);
    }
    out
}
