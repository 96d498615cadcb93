//! Differentiable training objectives.

use super::schedule::{DiffusionConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{RngState, Scalar, Tape, Tensor, Var};

/// Per-element timestep and noise for one training batch.
#[derive(Debug, Clone)]
pub struct NoiseDraw<S: Scalar> {
    pub t: Vec<usize>,
    pub eps: Tensor<S>,
}

impl<S: Scalar> NoiseDraw<S> {
    /// Uniform `t` in `1..=T` and standard normal noise per element, drawn in
    /// element order.
    pub fn sample(rng: &mut RngState, shape: &[usize], timesteps: usize) -> Self {
        let batch = shape[0];
        let per: usize = shape[1..].iter().product();
        let mut t = Vec::with_capacity(batch);
        let mut eps = Tensor::zeros(shape);
        for b in 0..batch {
            t.push(1 + rng.below(timesteps));
            rng.fill_normal(&mut eps.data_mut()[b * per..(b + 1) * per]);
        }
        NoiseDraw { t, eps }
    }
}

pub struct LossParts<'t, S: Scalar> {
    /// Mean squared noise-prediction error.
    pub simple: Var<'t, S>,
    /// Per-element bound term at each sampled `t`, averaged; gradients reach
    /// only the variance channels.
    pub vlb: Option<Var<'t, S>>,
    /// `simple + λ·vlb`.
    pub total: Var<'t, S>,
}

/// Evaluates the training objective for `x0` in [-1, 1] with explicit noise.
/// `model` maps `(x_t, t)` to the network output on `tape`.
pub fn losses_with<'t, S, F>(
    tape: &'t Tape<S>,
    model: F,
    x0: &Tensor<S>,
    draw: &NoiseDraw<S>,
    sched: &NoiseSchedule,
    cfg: &DiffusionConfig,
) -> Result<LossParts<'t, S>>
where
    S: Scalar,
    F: FnOnce(Var<'t, S>, &[usize]) -> Result<Var<'t, S>>,
{
    let shape = x0.shape().to_vec();
    if shape.len() != 4 || draw.eps.shape() != &shape[..] || draw.t.len() != shape[0] {
        return Err(Error::shape("training loss", &shape, draw.eps.shape()));
    }
    let (batch, channels) = (shape[0], shape[1]);
    let per = x0.len() / batch;
    let mut x_t = Vec::with_capacity(x0.len());
    for b in 0..batch {
        sched.check_t(draw.t[b])?;
        let ab = sched.alpha_bar(draw.t[b]);
        let (sa, sb) = (S::from_f64(ab.sqrt()), S::from_f64((1.0 - ab).sqrt()));
        let range = b * per..(b + 1) * per;
        x_t.extend(x0.data()[range.clone()].iter().zip(&draw.eps.data()[range]).map(|(&x, &e)| sa * x + sb * e));
    }
    let x_t = Tensor::new(shape.clone(), x_t)?;
    let out = model(tape.constant(x_t.clone()), &draw.t)?;
    let out_ch = out.shape()[1];
    let learned = out_ch == 2 * channels;
    if !learned && out_ch != channels {
        return Err(Error::shape("model output", &out.shape(), &shape));
    }
    let eps_pred = if learned { out.narrow(1, 0, channels)? } else { out };
    let simple = eps_pred.mse(tape.constant(draw.eps.clone()))?;

    let lambda = cfg.effective_vlb_weight();
    if !(learned && lambda > 0.0) {
        return Ok(LossParts { simple, vlb: None, total: simple });
    }
    let logits = out.narrow(1, channels, channels)?;
    let vlb = vlb_batch_term(tape, logits, &eps_pred.value(), &x_t, x0, &draw.t, sched)?;
    let total = simple.add(vlb.scale(lambda)?)?;
    Ok(LossParts { simple, vlb: Some(vlb), total })
}

/// Draws noise from `rng` and returns `L_simple`.
pub fn simple_loss<'t, S, F>(
    tape: &'t Tape<S>,
    model: F,
    x0: &Tensor<S>,
    rng: &mut RngState,
    sched: &NoiseSchedule,
) -> Result<Var<'t, S>>
where
    S: Scalar,
    F: FnOnce(Var<'t, S>, &[usize]) -> Result<Var<'t, S>>,
{
    if x0.rank() == 0 || x0.shape()[0] == 0 {
        return Err(Error::invalid("simple_loss needs a non-empty batch"));
    }
    let draw = NoiseDraw::sample(rng, x0.shape(), sched.timesteps());
    let cfg = DiffusionConfig { vlb_weight: 0.0, ..Default::default() };
    Ok(losses_with(tape, model, x0, &draw, sched, &cfg)?.simple)
}

fn per_batch<S: Scalar>(tape: &Tape<S>, values: Vec<f64>) -> Result<Var<'_, S>> {
    let n = values.len();
    Ok(tape.constant(Tensor::from_f64(vec![n, 1, 1, 1], &values)?))
}

/// Mean over elements of the KL term (t ≥ 2) or reconstruction NLL (t = 1),
/// with the reverse mean built from the detached noise prediction.
fn vlb_batch_term<'t, S: Scalar>(
    tape: &'t Tape<S>,
    logits: Var<'t, S>,
    eps_pred: &Tensor<S>,
    x_t: &Tensor<S>,
    x0: &Tensor<S>,
    ts: &[usize],
    sched: &NoiseSchedule,
) -> Result<Var<'t, S>> {
    let batch = ts.len();
    let per = x0.len() / batch;
    let mut mean_p = Vec::with_capacity(x0.len());
    let mut mean_q = Vec::with_capacity(x0.len());
    for (b, &t) in ts.iter().enumerate() {
        let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
        let inv = 1.0 / sched.alpha(t).sqrt();
        let (c0, ct) = sched.posterior_coefs(t);
        for i in b * per..(b + 1) * per {
            let (x, e, a) = (x_t.data()[i].as_f64(), eps_pred.data()[i].as_f64(), x0.data()[i].as_f64());
            mean_p.push(S::from_f64((x - coef * e) * inv));
            mean_q.push(S::from_f64(c0 * a + ct * x));
        }
    }
    let shape = x0.shape().to_vec();
    let mean_p = Tensor::new(shape.clone(), mean_p)?;
    let diff2 = Tensor::new(shape, mean_q)?.zip_map(&mean_p, |q, p| (q - p) * (q - p))?;

    let small: Vec<f64> = ts.iter().map(|&t| sched.posterior_log_var_clipped(t)).collect();
    let span: Vec<f64> = ts.iter().zip(&small).map(|(&t, s)| sched.beta(t).ln() - s).collect();
    // v = (logit + 1) / 2; logvar = small + v·(log β − small)
    let v = logits.add_scalar(1.0)?.scale(0.5)?;
    let logvar_p = v.mul(per_batch(tape, span)?)?.add(per_batch(tape, small.clone())?)?;

    let is_kl: Vec<f64> = ts.iter().map(|&t| if t >= 2 { 1.0 } else { 0.0 }).collect();
    let is_nll: Vec<f64> = is_kl.iter().map(|k| 1.0 - k).collect();
    let logvar_q = per_batch(tape, small)?;
    let kl = logvar_p
        .sub(logvar_q)?
        .add(logvar_q.sub(logvar_p)?.exp()?)?
        .add(tape.constant(diff2).mul(logvar_p.neg()?.exp()?)?)?
        .add_scalar(-1.0)?
        .scale(0.5)?;
    let nll = tape.constant(mean_p).discretized_gaussian_nll(logvar_p.scale(0.5)?, x0)?;
    let term = kl.mul(per_batch(tape, is_kl)?)?.add(nll.mul(per_batch(tape, is_nll)?)?)?;
    term.mean()
}
