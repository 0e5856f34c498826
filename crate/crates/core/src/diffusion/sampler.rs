//! Forward noising and single reverse steps.

use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Deterministic DDIM update (η = 0).
    #[default]
    Ddim,
    /// Ancestral DDPM update with the posterior variance β̃_t.
    Ddpm,
}

/// Smallest ᾱ accepted as a divisor.
const ALPHA_BAR_FLOOR: f64 = 1e-12;

/// `√ᾱ·x0 + √(1−ᾱ)·z`.
pub fn diffuse_with(x0: &Tensor, z: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let a = alpha_bar.sqrt() as f32;
    let b = (1.0 - alpha_bar).sqrt() as f32;
    x0.zip_map(z, "forward_diffuse", |x, n| a * x + b * n)
}

/// Closed-form sample of x_t given clean data `x0` and standard-normal `z`.
pub fn forward_diffuse(x0: &Tensor, t: usize, z: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    diffuse_with(x0, z, schedule.alpha_bar()[t])
}

/// Clean-data estimate `(x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if alpha_bar < ALPHA_BAR_FLOOR {
        return Err(Error::invalid(format!("alpha_bar {alpha_bar} too small to invert")));
    }
    let inv = (1.0 / alpha_bar.sqrt()) as f32;
    let c = (1.0 - alpha_bar).sqrt() as f32;
    x_t.zip_map(eps_hat, "predict_x0", |x, e| (x - c * e) * inv)
}

/// Noise-free DDPM mean `(x_t − (1−α_t)/√(1−ᾱ_t)·ε̂)/√α_t`.
pub fn ddpm_mean(x_t: &Tensor, eps_hat: &Tensor, alpha: f64, alpha_bar: f64) -> Result<Tensor> {
    if alpha < ALPHA_BAR_FLOOR {
        return Err(Error::invalid(format!("alpha {alpha} too small to invert")));
    }
    let coef = if alpha_bar < 1.0 {
        ((1.0 - alpha) / (1.0 - alpha_bar).sqrt()) as f32
    } else {
        0.0
    };
    let inv = (1.0 / alpha.sqrt()) as f32;
    x_t.zip_map(eps_hat, "ddpm_mean", |x, e| (x - coef * e) * inv)
}

/// Posterior standard deviation σ_t = √(β_t·(1−ᾱ_{t−1})/(1−ᾱ_t)); zero at t = 0.
pub fn ddpm_sigma(schedule: &NoiseSchedule, t: usize) -> f64 {
    let ab = schedule.alpha_bar()[t];
    let ab_prev = schedule.alpha_bar_prev(t);
    (schedule.beta(t) * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
}

/// One reverse step from x_t to x_{t−1}.
///
/// DDPM needs fresh standard-normal `noise` for t > 0. DDIM has no successor
/// state for t = 0; use [`predict_x0`] for the final output instead.
pub fn reverse_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    mode: SamplerKind,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    x_t.check_same_shape(eps_hat, "reverse_step")?;
    let ab = schedule.alpha_bar()[t];
    match mode {
        SamplerKind::Ddim => {
            if t == 0 {
                return Err(Error::invalid("ddim step at t = 0 has no successor state"));
            }
            let ab_prev = schedule.alpha_bar()[t - 1];
            let x0 = predict_x0(x_t, eps_hat, ab)?;
            let a = ab_prev.sqrt() as f32;
            let b = (1.0 - ab_prev).sqrt() as f32;
            x0.zip_map(eps_hat, "ddim_step", |x, e| a * x + b * e)
        }
        SamplerKind::Ddpm => {
            let mean = ddpm_mean(x_t, eps_hat, schedule.alpha()[t], ab)?;
            if t == 0 {
                return Ok(mean);
            }
            let z = noise.ok_or_else(|| Error::invalid("ddpm step needs fresh noise for t > 0"))?;
            let sigma = ddpm_sigma(schedule, t) as f32;
            mean.zip_map(z, "ddpm_step", |m, n| m + sigma * n)
        }
    }
}

/// Advances a chain state by one step: returns x_{t−1}, or the final clean
/// sample when `t = 0`.
pub fn advance(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    mode: SamplerKind,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    match (mode, t) {
        (SamplerKind::Ddim, 0) => predict_x0(x_t, eps_hat, schedule.alpha_bar()[0]),
        _ => reverse_step(x_t, eps_hat, t, schedule, mode, noise),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::ScheduleSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleSpec::linear(50, 1e-3, 0.2)).unwrap()
    }

    #[test]
    fn diffusion_limits() {
        let x0 = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let z = Tensor::vector(vec![0.3, 0.1, -0.7]);
        assert_eq!(diffuse_with(&x0, &z, 1.0).unwrap(), x0);
        assert_eq!(diffuse_with(&x0, &z, 0.0).unwrap(), z);
        assert!(forward_diffuse(&x0, 50, &z, &schedule()).is_err());
    }

    #[test]
    fn stepwise_diffusion_matches_closed_form_in_distribution() {
        let s = NoiseSchedule::new(ScheduleSpec::linear(10, 0.02, 0.2)).unwrap();
        let t = 6;
        let x0 = 1.5f64;
        let draws = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut values = Vec::with_capacity(draws);
        for _ in 0..draws {
            let mut x = x0;
            for step in 0..=t {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = s.alpha()[step].sqrt() * x + (1.0 - s.alpha()[step]).sqrt() * z;
            }
            values.push(x);
        }
        let n = draws as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let ab = s.alpha_bar()[t];
        let want_mean = ab.sqrt() * x0;
        let want_var = 1.0 - ab;
        // Standard errors of the sample mean and (Gaussian) sample variance.
        let se_mean = (want_var / n).sqrt();
        let se_var = want_var * (2.0 / (n - 1.0)).sqrt();
        assert!((mean - want_mean).abs() < 3.0 * se_mean, "mean {mean} vs {want_mean}");
        assert!((var - want_var).abs() < 3.0 * se_var, "var {var} vs {want_var}");
    }

    #[test]
    fn ddpm_mean_with_zero_prediction_and_unit_alpha_is_identity() {
        let x = Tensor::vector(vec![0.25, -1.0]);
        let eps = Tensor::zeros(&[2]);
        assert_eq!(ddpm_mean(&x, &eps, 1.0, 0.5).unwrap(), x);
    }

    #[test]
    fn ddim_with_oracle_noise_hits_algebraic_target() {
        let s = schedule();
        let x0 = Tensor::vector(vec![0.8, -1.1, 0.05, 2.0]);
        let z = Tensor::vector(vec![-0.4, 1.3, 0.9, -2.2]);
        for t in 1..s.steps() {
            let xt = forward_diffuse(&x0, t, &z, &s).unwrap();
            let prev = reverse_step(&xt, &z, t, &s, SamplerKind::Ddim, None).unwrap();
            let want = forward_diffuse(&x0, t - 1, &z, &s).unwrap();
            assert!(prev.max_abs_diff(&want).unwrap() <= 1e-5, "t = {t}");
        }
    }

    #[test]
    fn ddim_at_zero_is_an_error_and_ddpm_needs_noise() {
        let s = schedule();
        let x = Tensor::zeros(&[2]);
        assert!(reverse_step(&x, &x, 0, &s, SamplerKind::Ddim, None).is_err());
        assert!(reverse_step(&x, &x, 3, &s, SamplerKind::Ddpm, None).is_err());
        assert!(reverse_step(&x, &x, 0, &s, SamplerKind::Ddpm, None).is_ok());
        assert!(reverse_step(&x, &Tensor::zeros(&[3]), 3, &s, SamplerKind::Ddim, None).is_err());
    }

    #[test]
    fn ddpm_sigma_is_posterior_std() {
        let s = schedule();
        assert_eq!(ddpm_sigma(&s, 0), 0.0);
        let t = 10;
        let want = (s.beta(t) * (1.0 - s.alpha_bar()[t - 1]) / (1.0 - s.alpha_bar()[t])).sqrt();
        assert!((ddpm_sigma(&s, t) - want).abs() < 1e-15);
        assert!(ddpm_sigma(&s, t) < s.beta(t).sqrt());
    }

    #[test]
    fn final_ddim_output_is_x0_prediction() {
        let s = schedule();
        let x0 = Tensor::vector(vec![0.3, -0.6]);
        let z = Tensor::vector(vec![1.0, 0.5]);
        let x = forward_diffuse(&x0, 0, &z, &s).unwrap();
        let out = advance(&x, &z, 0, &s, SamplerKind::Ddim, None).unwrap();
        assert!(out.max_abs_diff(&x0).unwrap() < 1e-6);
    }
}
