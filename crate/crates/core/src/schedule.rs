//! Noise schedule and the closed-form pieces of the Gaussian diffusion process.
//!
//! Step indices are 1-based (`1..=T`), matching the usual DDPM notation. The
//! cumulative product at step 0 is taken to be 1, so the reverse posterior at
//! `t = 1` collapses onto the clean-image estimate with zero variance.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Parameters that fully determine a linear schedule. This is what gets
/// written into run configs and checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// Full-scale setting: 1000 steps, beta from 1e-4 to 0.01.
    pub const fn full() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.01,
        }
    }

    /// 200-step setting. The endpoints are the full-scale ones scaled by
    /// 1000 / 200 so that the terminal signal level stays close to the
    /// 1000-step schedule and sampling can start from a standard normal.
    pub const fn desk() -> Self {
        Self {
            steps: 200,
            beta_start: 5e-4,
            beta_end: 0.05,
        }
    }

    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::full()
    }
}

/// Which x_t coefficient to use in the posterior mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorForm {
    /// `sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t)`, the exact Gaussian conditional.
    #[default]
    Bayes,
    /// `(1 - alpha_t) (1 - abar_{t-1}) / (1 - abar_t)`. Kept only so the
    /// alternative coefficient can be evaluated side by side; it does not
    /// match the Gaussian conditional.
    Printed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linearly interpolated betas with `beta_1 = beta_start` and `beta_T = beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config(format!("schedule needs at least one step, got {steps}")));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta_start) || !in_unit(beta_end) || beta_start > beta_end {
            return Err(Error::Config(format!(
                "beta endpoints must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| {
                    if i == steps - 1 {
                        beta_end
                    } else {
                        beta_start + span * i as f64 / (steps - 1) as f64
                    }
                })
                .collect()
        };
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_vars = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_vars
    }

    fn check_step(&self, t: usize) -> Result<()> {
        ensure(t >= 1 && t <= self.steps(), || {
            format!("step {t} outside 1..={}", self.steps())
        })
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    /// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn q_sample<F: Float>(&self, x0: &[F], t: usize, eps: &[F]) -> Result<Vec<F>> {
        self.check_step(t)?;
        ensure(x0.len() == eps.len(), || {
            format!("noise has {} elements, image has {}", eps.len(), x0.len())
        })?;
        let ab = self.alpha_bar(t);
        let (a, b) = (cast::<F>(ab.sqrt()), cast::<F>((1.0 - ab).sqrt()));
        Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
    }

    /// Clean-image estimate `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`,
    /// optionally clamped to `[-1, 1]`.
    pub fn predict_x0<F: Float>(&self, x_t: &[F], eps_pred: &[F], t: usize, clamp: bool) -> Result<Vec<F>> {
        self.check_step(t)?;
        ensure(x_t.len() == eps_pred.len(), || {
            format!("noise prediction has {} elements, x_t has {}", eps_pred.len(), x_t.len())
        })?;
        let ab = self.alpha_bar(t);
        let inv = cast::<F>(1.0 / ab.sqrt());
        let b = cast::<F>((1.0 - ab).sqrt());
        let one = F::one();
        Ok(x_t
            .iter()
            .zip(eps_pred)
            .map(|(&x, &e)| {
                let v = (x - b * e) * inv;
                if clamp {
                    v.max(-one).min(one)
                } else {
                    v
                }
            })
            .collect())
    }

    /// Mean coefficients `(c_xt, c_x0)` and variance of `q(x_{t-1} | x_t, x0)`.
    pub fn posterior_coefficients(&self, t: usize, form: PosteriorForm) -> Result<(f64, f64, f64)> {
        self.check_step(t)?;
        let prev = self.alpha_bar(t - 1);
        let ab = self.alpha_bar(t);
        let beta = self.beta(t);
        let xt_scale = match form {
            PosteriorForm::Bayes => self.alpha(t).sqrt(),
            PosteriorForm::Printed => 1.0 - self.alpha(t),
        };
        let denom = 1.0 - ab;
        Ok((
            xt_scale * (1.0 - prev) / denom,
            prev.sqrt() * beta / denom,
            self.posterior_variance(t),
        ))
    }

    /// Mean and (scalar) variance of the reverse posterior.
    pub fn posterior_params<F: Float>(&self, x_t: &[F], x0_hat: &[F], t: usize) -> Result<(Vec<F>, f64)> {
        self.posterior_params_with(x_t, x0_hat, t, PosteriorForm::Bayes)
    }

    pub fn posterior_params_with<F: Float>(
        &self,
        x_t: &[F],
        x0_hat: &[F],
        t: usize,
        form: PosteriorForm,
    ) -> Result<(Vec<F>, f64)> {
        ensure(x_t.len() == x0_hat.len(), || {
            format!("x0 estimate has {} elements, x_t has {}", x0_hat.len(), x_t.len())
        })?;
        let (cx, c0, var) = self.posterior_coefficients(t, form)?;
        let (cx, c0) = (cast::<F>(cx), cast::<F>(c0));
        let mean = x_t.iter().zip(x0_hat).map(|(&x, &z)| cx * x + c0 * z).collect();
        Ok((mean, var))
    }
}

fn cast<F: Float>(v: f64) -> F {
    F::from(v).expect("f64 converts to any float type")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_schedule_endpoints() {
        let s = ScheduleConfig::full().build().unwrap();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.01);
    }

    #[test]
    fn single_step_schedule() {
        let s = DiffusionSchedule::linear(1, 0.3, 0.3).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.3);
        assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn four_step_cumulative_products() {
        let s = DiffusionSchedule::linear(4, 0.1, 0.4).unwrap();
        let expected = [0.9, 0.72, 0.504, 0.3024];
        for (got, want) in s.alpha_bars().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(matches!(DiffusionSchedule::linear(0, 1e-4, 0.01), Err(Error::Config(_))));
        assert!(matches!(DiffusionSchedule::linear(10, 0.0, 0.01), Err(Error::Config(_))));
        assert!(matches!(DiffusionSchedule::linear(10, 1e-4, 1.0), Err(Error::Config(_))));
        assert!(matches!(DiffusionSchedule::linear(10, 0.2, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn q_sample_closed_form() {
        let s = DiffusionSchedule::linear(4, 0.1, 0.4).unwrap();
        let out = s.q_sample(&[1.0f64], 2, &[1.0]).unwrap();
        assert!((out[0] - (0.72f64.sqrt() + 0.28f64.sqrt())).abs() < 1e-12);
        assert!((out[0] - 1.377678).abs() < 1e-6);

        let zero = s.q_sample(&[0.0f64, 0.0], 3, &[0.5, -2.0]).unwrap();
        let k = (1.0 - 0.504f64).sqrt();
        assert_eq!(zero, vec![k * 0.5, k * -2.0]);
    }

    #[test]
    fn q_sample_near_zero_noise_returns_input() {
        let s = DiffusionSchedule::linear(1, 1e-12, 1e-12).unwrap();
        let x0 = [0.25f64, -0.75, 1.0];
        let out = s.q_sample(&x0, 1, &[1.0, 1.0, 1.0]).unwrap();
        for (a, b) in out.iter().zip(x0) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_and_range_errors() {
        let s = DiffusionSchedule::linear(4, 0.1, 0.4).unwrap();
        assert!(matches!(s.q_sample(&[0.0f32; 3], 1, &[0.0; 2]), Err(Error::Argument(_))));
        assert!(matches!(s.q_sample(&[0.0f32; 3], 0, &[0.0; 3]), Err(Error::Argument(_))));
        assert!(matches!(s.posterior_params(&[0.0f32], &[0.0], 5), Err(Error::Argument(_))));
    }

    #[test]
    fn predict_x0_with_zero_noise_divides_by_signal_level() {
        let s = DiffusionSchedule::linear(4, 0.1, 0.4).unwrap();
        let out = s.predict_x0(&[0.5f64], &[0.0], 2, false).unwrap();
        assert!((out[0] - 0.5 / 0.72f64.sqrt()).abs() < 1e-12);
        let clamped = s.predict_x0(&[3.0f64], &[0.0], 2, true).unwrap();
        assert_eq!(clamped[0], 1.0);
    }

    #[test]
    fn posterior_at_first_step_is_the_estimate() {
        let s = DiffusionSchedule::linear(4, 0.1, 0.4).unwrap();
        let (mean, var) = s.posterior_params(&[0.3f64, -0.2], &[0.9, 0.1], 1).unwrap();
        assert_eq!(var, 0.0);
        assert!((mean[0] - 0.9).abs() < 1e-12 && (mean[1] - 0.1).abs() < 1e-12);
        let (zero, _) = s.posterior_params(&[0.0f64], &[0.0], 3).unwrap();
        assert_eq!(zero[0], 0.0);
    }

    #[test]
    fn printed_form_differs_from_bayes() {
        let s = DiffusionSchedule::linear(4, 0.1, 0.4).unwrap();
        let bayes = s.posterior_coefficients(3, PosteriorForm::Bayes).unwrap();
        let printed = s.posterior_coefficients(3, PosteriorForm::Printed).unwrap();
        assert_eq!(bayes.1, printed.1);
        assert!((bayes.0 - printed.0).abs() > 1e-3);
    }
}
