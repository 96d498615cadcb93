//! Decoupled-weight-decay Adam and a cosine learning-rate schedule.

use super::params::ParamStore;
use super::tape::Gradients;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to tensors of rank >= 2 only (kernels and projections).
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: ParamStore<S>,
    pub v: ParamStore<S>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig, params: &ParamStore<S>) -> Self {
        let zeros: ParamStore<S> = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        AdamW { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update at learning rate `lr`. Every parameter must have a gradient.
    pub fn update(&mut self, params: &mut ParamStore<S>, grads: &Gradients<S>, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
        let (one_b1, one_b2) = (S::from_f64(1.0 - c.beta1), S::from_f64(1.0 - c.beta2));
        let step_size = S::from_f64(lr / bc1);
        let inv_bc2 = S::from_f64(1.0 / bc2);
        let eps = S::from_f64(c.eps);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::invalid(format!("no gradient for `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let m = self.m.get_mut(name).ok_or_else(|| Error::invalid(format!("no moment for `{name}`")))?;
            let decay = if p.rank() >= 2 { S::from_f64(1.0 - lr * c.weight_decay) } else { S::one() };
            let v = self.v.get_mut(name).unwrap();
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *pi = *pi * decay - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `base` at step 0 to `floor` at `total`.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0.0, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 0.0, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 0.0, 50, 100) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::from_f64(vec![2], &[3.0, -2.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..Default::default() }, &p);
        for _ in 0..500 {
            let w = p.get("w").unwrap().clone();
            let mut g = Gradients::new();
            g.insert("w".into(), w.scale(2.0));
            opt.update(&mut p, &g, 0.1).unwrap();
        }
        assert!(p.get("w").unwrap().max_abs() < 1e-2);
    }
}
