//! Forward corruption, posterior, reverse sampling and the variational bound.

use super::schedule::{NoiseSchedule, VarianceMode};
use crate::error::{Error, Result};
use crate::numerics::ops::loss::discretized_gaussian_bin;
use crate::numerics::{ParamStore, RngState, Scalar, Tape, Tensor};
use crate::unet::UNet;

/// Value-level noise predictor used for sampling and bound evaluation.
/// Output has the input's channel count, or twice that when the second half
/// carries variance-interpolation logits.
pub trait Denoiser<S: Scalar>: Sync {
    fn predict(&self, x_t: &Tensor<S>, t: &[usize]) -> Result<Tensor<S>>;
}

impl<S: Scalar, F> Denoiser<S> for F
where
    F: Fn(&Tensor<S>, &[usize]) -> Result<Tensor<S>> + Sync,
{
    fn predict(&self, x_t: &Tensor<S>, t: &[usize]) -> Result<Tensor<S>> {
        self(x_t, t)
    }
}

/// A U-Net with fixed weights, evaluated without recording gradients.
pub struct UNetDenoiser<'a, S: Scalar> {
    pub net: &'a UNet,
    pub params: &'a ParamStore<S>,
}

impl<S: Scalar> Denoiser<S> for UNetDenoiser<'_, S> {
    fn predict(&self, x_t: &Tensor<S>, t: &[usize]) -> Result<Tensor<S>> {
        let tape = Tape::no_grad();
        let b = self.params.bind(&tape);
        let y = self.net.forward(&tape, &b, tape.constant(x_t.clone()), t)?;
        Ok((*y.value()).clone())
    }
}

/// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·eps`.
pub fn q_sample<S: Scalar>(x0: &Tensor<S>, t: usize, eps: &Tensor<S>, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    q_sample_with(x0, ab, eps)
}

/// [`q_sample`] for an explicit ᾱ.
pub fn q_sample_with<S: Scalar>(x0: &Tensor<S>, alpha_bar: f64, eps: &Tensor<S>) -> Result<Tensor<S>> {
    let (a, b) = (S::from_f64(alpha_bar.sqrt()), S::from_f64((1.0 - alpha_bar).sqrt()));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// KL(N(m1, v1) ‖ N(m2, v2)) in nats.
pub fn gaussian_kl(mean1: f64, var1: f64, mean2: f64, var2: f64) -> Result<f64> {
    if !(var1 > 0.0 && var2 > 0.0) {
        return Err(Error::invalid(format!("gaussian_kl needs positive variances, got {var1} and {var2}")));
    }
    Ok(kl_log(mean1, var1.ln(), mean2, var2.ln()))
}

fn kl_log(m1: f64, logv1: f64, m2: f64, logv2: f64) -> f64 {
    0.5 * (-1.0 + logv2 - logv1 + (logv1 - logv2).exp() + (m1 - m2).powi(2) * (-logv2).exp())
}

/// Mean and variance of q(x_{t-1} | x_t, x0) for `t >= 2`.
pub fn q_posterior<S: Scalar>(x0: &Tensor<S>, x_t: &Tensor<S>, t: usize, sched: &NoiseSchedule) -> Result<(Tensor<S>, f64)> {
    sched.check_t(t)?;
    if t == 1 {
        return Err(Error::invalid("q_posterior is undefined at t = 1; use the reconstruction term"));
    }
    let (c0, ct) = sched.posterior_coefs(t);
    let (c0, ct) = (S::from_f64(c0), S::from_f64(ct));
    Ok((x0.zip_map(x_t, |a, b| c0 * a + ct * b)?, sched.posterior_var(t)))
}

/// Splits a `[B, C', H, W]` model output into noise prediction and, when
/// `C' = 2C`, variance logits.
pub fn split_output<S: Scalar>(out: &Tensor<S>, channels: usize) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
    let s = out.shape();
    if s.len() != 4 || (s[1] != channels && s[1] != 2 * channels) {
        return Err(Error::invalid(format!("model output shape {s:?} does not carry {channels} noise channels")));
    }
    if s[1] == channels {
        return Ok((out.clone(), None));
    }
    let plane = channels * s[2] * s[3];
    let (mut eps, mut v) = (Vec::with_capacity(s[0] * plane), Vec::with_capacity(s[0] * plane));
    for chunk in out.data().chunks(2 * plane) {
        eps.extend_from_slice(&chunk[..plane]);
        v.extend_from_slice(&chunk[plane..]);
    }
    let shape = vec![s[0], channels, s[2], s[3]];
    Ok((Tensor::new(shape.clone(), eps)?, Some(Tensor::new(shape, v)?)))
}

/// Reverse-step mean and log variance for one model evaluation at a
/// uniform timestep `t`.
pub(crate) fn reverse_params<S: Scalar>(
    model_out: &Tensor<S>,
    x_t: &Tensor<S>,
    t: usize,
    sched: &NoiseSchedule,
    mode: VarianceMode,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let channels = x_t.shape()[1];
    let (eps, v) = split_output(model_out, channels)?;
    if eps.shape() != x_t.shape() {
        return Err(Error::shape("reverse step", eps.shape(), x_t.shape()));
    }
    if mode.is_learned() && v.is_none() {
        return Err(Error::invalid("learned variance needs a model with variance channels"));
    }
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let mean = x_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (x.as_f64() - coef * e.as_f64()) * inv_sqrt_alpha)
        .collect();
    let logvar = match (&v, mode) {
        (Some(v), VarianceMode::LearnedInterp) => {
            v.data().iter().map(|&o| sched.reverse_log_var(t, mode, (o.as_f64() + 1.0) / 2.0)).collect()
        }
        _ => vec![sched.reverse_log_var(t, mode, 0.0); x_t.len()],
    };
    Ok((mean, logvar))
}

/// Reverse mean μ_θ and log variance log Σ_θ at a uniform timestep `t`.
pub fn p_mean_variance<S: Scalar>(
    model: &dyn Denoiser<S>,
    x_t: &Tensor<S>,
    t: usize,
    sched: &NoiseSchedule,
    mode: VarianceMode,
) -> Result<(Vec<f64>, Vec<f64>)> {
    sched.check_t(t)?;
    let out = model.predict(x_t, &vec![t; x_t.shape()[0]])?;
    reverse_params(&out, x_t, t, sched, mode)
}

fn step_with<S: Scalar>(
    model: &dyn Denoiser<S>,
    x_t: &Tensor<S>,
    t: usize,
    sched: &NoiseSchedule,
    mode: VarianceMode,
    mut noise: impl FnMut(usize, &mut [f64]),
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    let batch = x_t.shape()[0];
    let out = model.predict(x_t, &vec![t; batch])?;
    let (mean, logvar) = reverse_params(&out, x_t, t, sched, mode)?;
    if t == 1 {
        return Tensor::new(x_t.shape().to_vec(), mean.into_iter().map(S::from_f64).collect());
    }
    let per = x_t.len() / batch;
    let mut z = vec![0.0; per];
    let mut next = Vec::with_capacity(x_t.len());
    for b in 0..batch {
        noise(b, &mut z);
        for i in 0..per {
            let k = b * per + i;
            next.push(S::from_f64(mean[k] + (0.5 * logvar[k]).exp() * z[i]));
        }
    }
    Tensor::new(x_t.shape().to_vec(), next)
}

/// One ancestral step `x_t -> x_{t-1}`; no noise is added at `t = 1`.
pub fn p_sample_step<S: Scalar>(
    model: &dyn Denoiser<S>,
    x_t: &Tensor<S>,
    t: usize,
    rng: &mut RngState,
    sched: &NoiseSchedule,
    mode: VarianceMode,
) -> Result<Tensor<S>> {
    step_with(model, x_t, t, sched, mode, |_, z| z.iter_mut().for_each(|v| *v = rng.normal()))
}

/// Runs the reverse chain from pure noise and returns images in [0, 1].
///
/// Element `i` draws all of its noise from `rng.derive(i)`, so the result is
/// independent of how the batch is split over `workers` threads.
pub fn sample_loop<S: Scalar>(
    model: &dyn Denoiser<S>,
    shape: &[usize],
    rng: &RngState,
    sched: &NoiseSchedule,
    mode: VarianceMode,
    workers: usize,
) -> Result<Tensor<S>> {
    sample_loop_at(model, shape, rng, 0, sched, mode, workers)
}

/// [`sample_loop`] for elements `first..first + B` of a longer run: element
/// `i` of the batch uses `rng.derive(first + i)`, so splitting a run into
/// batches does not change any image.
pub fn sample_loop_at<S: Scalar>(
    model: &dyn Denoiser<S>,
    shape: &[usize],
    rng: &RngState,
    first: usize,
    sched: &NoiseSchedule,
    mode: VarianceMode,
    workers: usize,
) -> Result<Tensor<S>> {
    if shape.len() != 4 || shape.contains(&0) {
        return Err(Error::invalid(format!("sample shape must be [B, C, H, W], got {shape:?}")));
    }
    let batch = shape[0];
    let per: Vec<usize> = shape[1..].to_vec();
    let workers = workers.clamp(1, batch);
    let chunk = batch.div_ceil(workers);
    let ranges: Vec<(usize, usize)> = (0..batch).step_by(chunk).map(|s| (s, (s + chunk).min(batch))).collect();

    let run = |(lo, hi): (usize, usize)| -> Result<Vec<S>> {
        let mut rngs: Vec<RngState> = (lo..hi).map(|i| rng.derive((first + i) as u64)).collect();
        let mut cshape = vec![hi - lo];
        cshape.extend_from_slice(&per);
        let mut x = Tensor::zeros(&cshape);
        for (b, r) in rngs.iter_mut().enumerate() {
            let n = x.len() / (hi - lo);
            r.fill_normal(&mut x.data_mut()[b * n..(b + 1) * n]);
        }
        for t in (1..=sched.timesteps()).rev() {
            x = step_with(model, &x, t, sched, mode, |b, z| z.iter_mut().for_each(|v| *v = rngs[b].normal()))?;
        }
        Ok(x.into_data())
    };

    let parts: Vec<Result<Vec<S>>> = if ranges.len() == 1 {
        vec![run(ranges[0])]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = ranges.iter().map(|&r| s.spawn(move || run(r))).collect();
            handles.into_iter().map(|h| h.join().expect("sampling worker panicked")).collect()
        })
    };
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend(p?);
    }
    let half = S::from_f64(0.5);
    let one = S::one();
    let data = data.into_iter().map(|v| (v.max(-one).min(one) + one) * half).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Bound terms for a batch `x0` in [-1, 1], each averaged over elements:
/// entry 0 is the reconstruction term −log p(x0 | x1) under the discretized
/// Gaussian, entry `t - 1` for `t` in `2..=T` is
/// KL(q(x_{t-1} | x_t, x0) ‖ p(x_{t-1} | x_t)), and entry `T` is the prior
/// term KL(q(x_T | x0) ‖ N(0, I)). Their sum is the negative bound.
pub fn vlb_terms<S: Scalar>(
    model: &dyn Denoiser<S>,
    x0: &Tensor<S>,
    rng: &mut RngState,
    sched: &NoiseSchedule,
    mode: VarianceMode,
) -> Result<Vec<f64>> {
    let big_t = sched.timesteps();
    let batch = x0.shape().first().copied().unwrap_or(0);
    if x0.rank() != 4 || batch == 0 {
        return Err(Error::invalid(format!("vlb_terms expects [B, C, H, W] data, got {:?}", x0.shape())));
    }
    let n = x0.len() as f64;
    let mut terms = Vec::with_capacity(big_t + 1);
    for t in 1..=big_t {
        let eps: Tensor<S> = rng.normal_tensor(x0.shape());
        let x_t = q_sample(x0, t, &eps, sched)?;
        let out = model.predict(&x_t, &vec![t; batch])?;
        let (mean, logvar) = reverse_params(&out, &x_t, t, sched, mode)?;
        let term = if t == 1 {
            x0.data()
                .iter()
                .zip(mean.iter().zip(&logvar))
                .map(|(&x, (&m, &lv))| -discretized_gaussian_bin(x.as_f64(), m, 0.5 * lv).0.max(1e-12).ln())
                .sum::<f64>()
        } else {
            let (c0, ct) = sched.posterior_coefs(t);
            let logvar_q = sched.posterior_var(t).ln();
            x0.data()
                .iter()
                .zip(x_t.data())
                .zip(mean.iter().zip(&logvar))
                .map(|((&a, &b), (&m, &lv))| kl_log(c0 * a.as_f64() + ct * b.as_f64(), logvar_q, m, lv))
                .sum::<f64>()
        };
        terms.push(term / n);
    }
    let ab = sched.alpha_bar(big_t);
    let prior: f64 = x0.data().iter().map(|&x| kl_log(ab.sqrt() * x.as_f64(), (1.0 - ab).ln(), 0.0, 0.0)).sum();
    terms.push(prior / n);
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four() -> NoiseSchedule {
        NoiseSchedule::linear(4, 0.1, 0.4).unwrap()
    }

    #[test]
    fn q_sample_hand_value_and_limits() {
        let x0 = Tensor::<f64>::from_f64(vec![1], &[2.0]).unwrap();
        let eps = Tensor::from_f64(vec![1], &[1.0]).unwrap();
        let x = q_sample_with(&x0, 0.25, &eps).unwrap();
        assert!((x.data()[0] - (0.5 * 2.0 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((x.data()[0] - 1.8660).abs() < 1e-4);
        assert_eq!(q_sample_with(&x0, 1.0, &eps).unwrap().data(), &[2.0]);
        assert_eq!(q_sample_with(&x0, 0.0, &eps).unwrap().data(), &[1.0]);
        assert!(q_sample(&x0, 0, &eps, &four()).is_err());
        assert!(q_sample(&x0, 5, &eps, &four()).is_err());
    }

    #[test]
    fn kl_hand_values() {
        assert_eq!(gaussian_kl(0.3, 2.0, 0.3, 2.0).unwrap(), 0.0);
        assert!((gaussian_kl(1.0, 1.0, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-12);
        let expect = 0.5 * (-(4f64.ln()) + 4.0 - 1.0);
        assert!((gaussian_kl(0.0, 4.0, 0.0, 1.0).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.8069).abs() < 1e-4);
        assert!(gaussian_kl(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(gaussian_kl(0.0, 1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn posterior_hand_values() {
        let s = four();
        let one = Tensor::<f64>::ones(&[1]);
        let (m, v) = q_posterior(&one, &one, 2, &s).unwrap();
        let expect = (0.9f64.sqrt() * 0.2 + 0.8f64.sqrt() * 0.1) / 0.28;
        assert!((m.data()[0] - expect).abs() < 1e-12);
        assert!((m.data()[0] - 0.997069).abs() < 1e-6);
        assert!((v - 0.07143).abs() < 1e-5);
        let zero = Tensor::<f64>::zeros(&[1]);
        assert_eq!(q_posterior(&zero, &zero, 3, &s).unwrap().0.data(), &[0.0]);
        assert!(q_posterior(&one, &one, 1, &s).is_err());
    }

    #[test]
    fn split_rejects_wrong_channels() {
        let out = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        assert!(split_output(&out, 2).is_err());
        let (e, v) = split_output(&Tensor::<f64>::zeros(&[2, 4, 2, 2]), 2).unwrap();
        assert_eq!(e.shape(), &[2, 2, 2, 2]);
        assert!(v.is_some());
    }
}
