use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar};

/// Exponential moving average of model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<S: Scalar> {
    pub decay: f64,
    pub shadow: ParamStore<S>,
}

impl<S: Scalar> EmaState<S> {
    pub fn new(decay: f64, weights: &ParamStore<S>) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::invalid(format!("ema decay must lie in (0, 1], got {decay}")));
        }
        Ok(EmaState { decay, shadow: weights.clone() })
    }

    /// `shadow ← decay·shadow + (1 − decay)·weights`.
    pub fn update(&mut self, weights: &ParamStore<S>) -> Result<()> {
        self.update_with(self.decay, weights)
    }

    /// Same as [`EmaState::update`] with an explicit decay for this step.
    pub fn update_with(&mut self, decay: f64, weights: &ParamStore<S>) -> Result<()> {
        if !self.shadow.same_manifest(weights) {
            return Err(Error::invalid("ema shadow and weights have different manifests"));
        }
        let (d, w) = (S::from_f64(decay), S::from_f64(1.0 - decay));
        for (name, s) in self.shadow.iter_mut() {
            let src = weights.get(name).expect("manifest checked");
            for (a, &b) in s.data_mut().iter_mut().zip(src.data()) {
                *a = d * *a + w * b;
            }
        }
        Ok(())
    }
}
