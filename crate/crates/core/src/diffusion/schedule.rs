use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Reverse-process variance choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMode {
    /// Posterior variance β̃_t.
    FixedSmall,
    /// Forward variance β_t.
    FixedLarge,
    /// Log-space interpolation between β̃_t and β_t driven by the model's
    /// extra output channels.
    LearnedInterp,
}

impl VarianceMode {
    pub fn is_learned(self) -> bool {
        self == VarianceMode::LearnedInterp
    }
}

impl FromStr for VarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_small" => Ok(VarianceMode::FixedSmall),
            "fixed_large" => Ok(VarianceMode::FixedLarge),
            "learned_interp" => Ok(VarianceMode::LearnedInterp),
            other => Err(Error::Config(format!(
                "unknown variance mode `{other}` (expected fixed_small, fixed_large or learned_interp)"
            ))),
        }
    }
}

impl fmt::Display for VarianceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarianceMode::FixedSmall => "fixed_small",
            VarianceMode::FixedLarge => "fixed_large",
            VarianceMode::LearnedInterp => "learned_interp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub variance_mode: VarianceMode,
    /// Weight λ of the variational bound term; only used with a learned variance.
    pub vlb_weight: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            variance_mode: VarianceMode::LearnedInterp,
            vlb_weight: 1e-3,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_start < self.beta_end) {
            return Err(Error::Config(format!("beta_start {} must be below beta_end {}", self.beta_start, self.beta_end)));
        }
        if !(self.vlb_weight >= 0.0) {
            return Err(Error::Config(format!("vlb_weight must be non-negative, got {}", self.vlb_weight)));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    /// λ actually applied during training.
    pub fn effective_vlb_weight(&self) -> f64 {
        if self.variance_mode.is_learned() {
            self.vlb_weight
        } else {
            0.0
        }
    }
}

/// Per-step quantities of the forward process. Timesteps are 1-based:
/// `beta(t)` is β_t for `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// β̃_t; zero at t = 1.
    pub posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly spaced over `1..=T`, endpoints included.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")));
        }
        let beta: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_var = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])
            })
            .collect();
        NoiseSchedule { beta, alpha, alpha_bar, posterior_var }
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            Err(Error::invalid(format!("timestep {t} outside 1..={}", self.timesteps())))
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// ᾱ_{t-1}, with ᾱ_0 = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    /// log β̃_t with the t = 1 entry (which is zero) replaced by β̃_2.
    pub fn posterior_log_var_clipped(&self, t: usize) -> f64 {
        if t == 1 && self.timesteps() > 1 {
            self.posterior_var[1].ln()
        } else if t == 1 {
            self.beta[0].ln()
        } else {
            self.posterior_var[t - 1].ln()
        }
    }

    /// Coefficients `(c0, ct)` of the posterior mean `c0·x0 + ct·x_t`.
    pub fn posterior_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let prev = self.alpha_bar_prev(t);
        let c0 = prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - prev) / (1.0 - ab);
        (c0, ct)
    }

    /// Reverse-process log variance at `t` for a fixed mode, or for the
    /// learned mode given the interpolation weight `v`.
    pub fn reverse_log_var(&self, t: usize, mode: VarianceMode, v: f64) -> f64 {
        let small = self.posterior_log_var_clipped(t);
        let large = self.beta(t).ln();
        match mode {
            VarianceMode::FixedSmall => small,
            VarianceMode::FixedLarge => large,
            VarianceMode::LearnedInterp => v * large + (1.0 - v) * small,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_step_hand_values() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        for (a, b) in s.beta.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in s.alpha_bar.iter().zip([0.9, 0.72, 0.504, 0.3024]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((s.posterior_var(2) - 0.2 * 0.1 / 0.28).abs() < 1e-12);
        assert_eq!(s.posterior_var(1), 0.0);
    }

    #[test]
    fn single_step() {
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        assert_eq!(s.beta, vec![0.3]);
        assert_eq!(s.alpha_bar, vec![0.7]);
    }

    #[test]
    fn bounds_rejected() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        let cfg = DiffusionConfig { vlb_weight: -1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!("bogus".parse::<VarianceMode>().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [VarianceMode::FixedSmall, VarianceMode::FixedLarge, VarianceMode::LearnedInterp] {
            assert_eq!(m.to_string().parse::<VarianceMode>().unwrap(), m);
        }
    }
}
