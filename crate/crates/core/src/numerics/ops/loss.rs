use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::{Scalar, Tensor};

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Half-width of one of 256 uniform bins over [-1, 1].
pub const BIN_HALF_WIDTH: f64 = 1.0 / 255.0;
const PROB_FLOOR: f64 = 1e-12;

/// Bin probability and its partials w.r.t. mean and log-scale for one
/// element of a discretized Gaussian on 256 bins over [-1, 1]. The edge
/// bins absorb the tails.
pub fn discretized_gaussian_bin(x: f64, mean: f64, log_scale: f64) -> (f64, f64, f64) {
    let inv_s = (-log_scale).exp();
    let plus = (x - mean + BIN_HALF_WIDTH) * inv_s;
    let minus = (x - mean - BIN_HALF_WIDTH) * inv_s;
    if x < -0.999 {
        let p = normal_cdf(plus);
        let f = normal_pdf(plus);
        (p, -f * inv_s, -f * plus)
    } else if x > 0.999 {
        let p = 0.5 * libm::erfc(minus / std::f64::consts::SQRT_2);
        let f = normal_pdf(minus);
        (p, f * inv_s, f * minus)
    } else {
        let p = normal_cdf(plus) - normal_cdf(minus);
        let (fp, fm) = (normal_pdf(plus), normal_pdf(minus));
        (p, -(fp - fm) * inv_s, -(fp * plus - fm * minus))
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    /// Mean softmax cross-entropy of `self` logits `[N, K]` against class indices.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, S>> {
        let lv = self.value();
        let ls = lv.shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &ls, &[labels.len()]));
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![S::zero(); n * k];
        let mut loss = S::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv.data()[i * k..(i + 1) * k];
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let z: S = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[y];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let inv_n = S::from_f64(1.0 / n as f64);
        let labels = labels.to_vec();
        self.tape().record("cross_entropy", Tensor::scalar(loss * inv_n), &[self], move |g| {
            let scale = g.data()[0] * inv_n;
            let mut d = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                d[i * k + y] -= S::one();
            }
            d.iter_mut().for_each(|v| *v *= scale);
            vec![Some(Tensor::new(vec![n, k], d).unwrap())]
        })
    }

    /// Per-element negative log-likelihood of fixed data `x0` (scaled to
    /// [-1, 1]) under a Gaussian with mean `self` and log standard deviation
    /// `log_scale`, discretized to 256 bins.
    pub fn discretized_gaussian_nll(self, log_scale: Var<'t, S>, x0: &Tensor<S>) -> Result<Var<'t, S>> {
        let (mv, lv) = (self.value(), log_scale.value());
        if mv.shape() != x0.shape() || lv.shape() != x0.shape() {
            return Err(Error::shape("discretized_gaussian_nll", mv.shape(), x0.shape()));
        }
        let len = x0.len();
        let mut out = Vec::with_capacity(len);
        let mut dmean = Vec::with_capacity(len);
        let mut dls = Vec::with_capacity(len);
        for i in 0..len {
            let (p, dp_dm, dp_dl) =
                discretized_gaussian_bin(x0.data()[i].as_f64(), mv.data()[i].as_f64(), lv.data()[i].as_f64());
            if p > PROB_FLOOR {
                out.push(S::from_f64(-p.ln()));
                dmean.push(S::from_f64(-dp_dm / p));
                dls.push(S::from_f64(-dp_dl / p));
            } else {
                out.push(S::from_f64(-PROB_FLOOR.ln()));
                dmean.push(S::zero());
                dls.push(S::zero());
            }
        }
        let shape = x0.shape().to_vec();
        let out = Tensor::new(shape.clone(), out)?;
        self.tape().record("discretized_gaussian_nll", out, &[self, log_scale], move |g| {
            let gm: Vec<S> = g.data().iter().zip(&dmean).map(|(&a, &b)| a * b).collect();
            let gl: Vec<S> = g.data().iter().zip(&dls).map(|(&a, &b)| a * b).collect();
            vec![Some(Tensor::new(shape.clone(), gm).unwrap()), Some(Tensor::new(shape.clone(), gl).unwrap())]
        })
    }
}
