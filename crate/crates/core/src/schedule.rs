//! Variance schedule and the forward / reverse diffusion transitions.
//!
//! Timesteps are 1-indexed (`t = 1..=T`) and `alpha_bar(0) = 1`.

use crate::error::{DivaError, Result};
use crate::tensor::Tensor;

/// Precomputed per-timestep tables for a DDPM chain.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_min` at `t = 1` to `beta_max` at `t = T`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(DivaError::Schedule("T must be at least 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(DivaError::Schedule(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let denom = (steps.max(2) - 1) as f64;
        let betas = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / denom)
            .collect();
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit per-step variances `β_1..β_T`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(DivaError::Schedule("T must be at least 1".into()));
        }
        if let Some((i, b)) = beta
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(DivaError::Schedule(format!(
                "beta[{}] = {b} outside (0, 1)",
                i + 1
            )));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma = (0..beta.len())
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    ((1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
                }
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(DivaError::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.idx(t)?])
    }

    /// Posterior standard deviation `σ_t = sqrt((1−ᾱ_{t−1})/(1−ᾱ_t)·β_t)`,
    /// with `σ_1 = 0`.
    pub fn posterior_sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.idx(t)?])
    }

    /// Closed-form sample of `x_t` given `x_0`: `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
    pub fn forward_diffuse(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bar(self.idx(t)? + 1)?;
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(eps, |x, e| s * x + n * e)
    }

    /// One Markov step: `√(1−β_t)·x_prev + √β_t·eps_t`.
    pub fn step_forward(&self, x_prev: &Tensor, t: usize, eps_t: &Tensor) -> Result<Tensor> {
        let b = self.beta(t)?;
        let (s, n) = ((1.0 - b).sqrt(), b.sqrt());
        x_prev.zip_map(eps_t, |x, e| s * x + n * e)
    }

    /// Ancestral reverse transition from `x_t` to `x_{t−1}`.
    pub fn reverse_step(
        &self,
        x_t: &Tensor,
        t: usize,
        eps_hat: &Tensor,
        noise: &Tensor,
    ) -> Result<Tensor> {
        let i = self.idx(t)?;
        let (a, ab, sigma) = (self.alpha[i], self.alpha_bar[i], self.sigma[i]);
        reverse_step_coeffs(x_t, eps_hat, noise, a, ab, sigma)
    }
}

/// Reverse step with explicit coefficients.
pub fn reverse_step_coeffs(
    x_t: &Tensor,
    eps_hat: &Tensor,
    noise: &Tensor,
    alpha: f64,
    alpha_bar: f64,
    sigma: f64,
) -> Result<Tensor> {
    let c = (1.0 - alpha) / (1.0 - alpha_bar).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mean = x_t.zip_map(eps_hat, |x, e| inv * (x - c * e))?;
    mean.zip_map(noise, |m, z| m + sigma * z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_gaussian, RngStream};

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn first_and_last_alpha_bar() {
        let s = default_schedule();
        assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bar(1000).unwrap() < 1e-4);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 0.0]).is_err());
        let s = default_schedule();
        assert!(matches!(
            s.beta(0),
            Err(DivaError::TimestepOutOfRange { t: 0, max: 1000 })
        ));
        assert!(s.posterior_sigma(1001).is_err());
    }

    #[test]
    fn schedule_table_invariants() {
        let s = default_schedule();
        let mut prod = 1.0;
        for t in 1..=1000 {
            let b = s.beta(t).unwrap();
            assert!(b > 0.0 && b < 1.0);
            prod *= 1.0 - b;
            assert!((s.alpha_bar(t).unwrap() - prod).abs() < 1e-12);
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            let sg = s.posterior_sigma(t).unwrap();
            assert!(sg * sg <= b);
        }
    }

    #[test]
    fn forward_diffuse_examples() {
        // ᾱ_1 = 0.81
        let s = NoiseSchedule::from_betas(vec![0.19]).unwrap();
        let one = Tensor::scalar(1.0);
        let zero = Tensor::scalar(0.0);
        let y = s.forward_diffuse(&one, 1, &zero).unwrap();
        assert!((y.item() - 0.9).abs() < 1e-15);
        let eps = Tensor::scalar(2.0);
        let y = s.forward_diffuse(&zero, 1, &eps).unwrap();
        assert!((y.item() - 0.19f64.sqrt() * 2.0).abs() < 1e-15);
        assert!(s.forward_diffuse(&one, 2, &zero).is_err());
        assert!(s.forward_diffuse(&one, 1, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn step_forward_examples() {
        let s = NoiseSchedule::from_betas(vec![0.04]).unwrap();
        let y = s
            .step_forward(&Tensor::scalar(0.0), 1, &Tensor::scalar(1.0))
            .unwrap();
        assert!((y.item() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn reverse_step_examples() {
        let x = Tensor::scalar(1.0);
        let r = reverse_step_coeffs(
            &x,
            &Tensor::scalar(1.0),
            &Tensor::scalar(0.0),
            0.99,
            0.9,
            0.0,
        )
        .unwrap();
        assert!((r.item() - 0.973256).abs() < 1e-6, "{}", r.item());

        let s = default_schedule();
        let x = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let z = Tensor::zeros(&[3]);
        let r = s.reverse_step(&x, 500, &z, &z).unwrap();
        let a = s.alpha(500).unwrap();
        for (o, i) in r.data().iter().zip(x.data()) {
            assert!((o - i / a.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_sigma_examples() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.1]).unwrap();
        assert_eq!(s.posterior_sigma(1).unwrap(), 0.0);
        let expected = ((1.0 - 0.9) / (1.0 - 0.81) * 0.1f64).sqrt();
        assert!((s.posterior_sigma(2).unwrap() - expected).abs() < 1e-15);
        assert!((s.posterior_sigma(2).unwrap() - 0.229416).abs() < 1e-6);
    }

    #[test]
    fn oracle_denoiser_reverse_chain_recovers_signal() {
        let s = default_schedule();
        let x0 = Tensor::new(&[8], vec![0.9, -0.4, 0.1, 0.7, -1.0, 0.0, 0.33, -0.25]).unwrap();
        let eps = sample_gaussian(&[8], &mut RngStream::new(3, 0));
        let mut x = s.forward_diffuse(&x0, 1000, &eps).unwrap();
        let zero = Tensor::zeros(&[8]);
        for t in (1..=1000).rev() {
            let ab = s.alpha_bar(t).unwrap();
            // The ε consistent with the current x_t and the true x0.
            let true_eps = x
                .zip_map(&x0, |xt, x0| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                .unwrap();
            x = reverse_step_coeffs(&x, &true_eps, &zero, s.alpha(t).unwrap(), ab, 0.0).unwrap();
        }
        assert!(x.max_abs_diff(&x0).unwrap() < 1e-3);
    }
}
