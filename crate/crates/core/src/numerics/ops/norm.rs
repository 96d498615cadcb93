use crate::error::{Error, Result};
use crate::numerics::ops::shape::split_at_axis;
use crate::numerics::tape::Var;
use crate::numerics::tensor::{Scalar, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group count used by the network blocks: 8, or the channel count when
/// there are fewer than 8 channels.
pub fn default_groups(channels: usize) -> usize {
    if channels < 8 {
        channels
    } else {
        8
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    /// Group normalization of `[B, C, ...]` with per-channel affine
    /// `gamma [C]`, `beta [C]`.
    pub fn group_norm(self, gamma: Var<'t, S>, beta: Var<'t, S>, groups: usize) -> Result<Var<'t, S>> {
        let xv = self.value();
        let xs = xv.shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::invalid(format!("group_norm needs [B, C, ...], got {xs:?}")));
        }
        let (b, c) = (xs[0], xs[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!("group count {groups} does not divide {c} channels")));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape("group_norm affine", gv.shape(), &[c]));
        }
        let spatial = xv.len() / (b * c);
        let cpg = c / groups;
        let m = cpg * spatial;
        let inv_m = S::from_f64(1.0 / m as f64);
        let eps = S::from_f64(GROUP_NORM_EPS);
        let mut xhat = Tensor::zeros(&xs);
        let mut rstd = vec![S::zero(); b * groups];
        let mut out = Tensor::zeros(&xs);
        for n in 0..b {
            for gi in 0..groups {
                let start = (n * c + gi * cpg) * spatial;
                let xg = &xv.data()[start..start + m];
                let mean = xg.iter().copied().sum::<S>() * inv_m;
                let var = xg.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_m;
                let r = S::one() / (var + eps).sqrt();
                rstd[n * groups + gi] = r;
                let xh = &mut xhat.data_mut()[start..start + m];
                for (d, &v) in xh.iter_mut().zip(xg) {
                    *d = (v - mean) * r;
                }
                let od = &mut out.data_mut()[start..start + m];
                for k in 0..cpg {
                    let ch = gi * cpg + k;
                    let (ga, be) = (gv.data()[ch], bv.data()[ch]);
                    for j in k * spatial..(k + 1) * spatial {
                        od[j] = xh[j] * ga + be;
                    }
                }
            }
        }
        self.tape().record("group_norm", out, &[self, gamma, beta], move |g| {
            let gd = g.data();
            let xh = xhat.data();
            let mut dx = Tensor::zeros(&xs);
            let mut dgamma = Tensor::zeros(&[c]);
            let mut dbeta = Tensor::zeros(&[c]);
            let mut dxhat = vec![S::zero(); m];
            for n in 0..b {
                for gi in 0..groups {
                    let start = (n * c + gi * cpg) * spatial;
                    for k in 0..cpg {
                        let ch = gi * cpg + k;
                        let ga = gv.data()[ch];
                        let (mut sg, mut sgx) = (S::zero(), S::zero());
                        for j in k * spatial..(k + 1) * spatial {
                            let gj = gd[start + j];
                            sg += gj;
                            sgx += gj * xh[start + j];
                            dxhat[j] = gj * ga;
                        }
                        dgamma.data_mut()[ch] += sgx;
                        dbeta.data_mut()[ch] += sg;
                    }
                    let xg = &xh[start..start + m];
                    let mean_d = dxhat.iter().copied().sum::<S>() * inv_m;
                    let mean_dx = dxhat.iter().zip(xg).map(|(&d, &x)| d * x).sum::<S>() * inv_m;
                    let r = rstd[n * groups + gi];
                    let dd = &mut dx.data_mut()[start..start + m];
                    for j in 0..m {
                        dd[j] = r * (dxhat[j] - mean_d - xg[j] * mean_dx);
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        })
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, S>> {
        let xv = self.value();
        let xs = xv.shape().to_vec();
        if axis >= xs.len() {
            return Err(Error::invalid(format!("softmax axis {axis} on shape {xs:?}")));
        }
        let (outer, n, inner) = split_at_axis(&xs, axis);
        let mut out = Tensor::zeros(&xs);
        {
            let (src, dst) = (xv.data(), out.data_mut());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let max = (0..n).map(|k| src[at(k)]).fold(S::neg_infinity(), S::max);
                    let mut z = S::zero();
                    for k in 0..n {
                        let e = (src[at(k)] - max).exp();
                        dst[at(k)] = e;
                        z += e;
                    }
                    for k in 0..n {
                        dst[at(k)] = dst[at(k)] / z;
                    }
                }
            }
        }
        let y = out.clone();
        self.tape().record("softmax", out, &[self], move |g| {
            let mut dx = Tensor::zeros(&xs);
            let (yd, gd, dd) = (y.data(), g.data(), dx.data_mut());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: S = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    for k in 0..n {
                        dd[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..32).map(|v| (v * v) as f64 * 0.1).collect();
        let x = tape.constant(Tensor::from_f64(vec![1, 4, 2, 4], &data).unwrap());
        let y = x
            .group_norm(tape.constant(Tensor::ones(&[4])), tape.constant(Tensor::zeros(&[4])), 2)
            .unwrap()
            .value();
        for g in 0..2 {
            let s = &y.data()[g * 16..(g + 1) * 16];
            let mean: f64 = s.iter().sum::<f64>() / 16.0;
            let var: f64 = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn group_count_must_divide_channels() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 6, 2, 2]));
        let r = x.group_norm(tape.constant(Tensor::ones(&[6])), tape.constant(Tensor::zeros(&[6])), 4);
        assert!(r.is_err());
        assert_eq!(default_groups(4), 4);
        assert_eq!(default_groups(64), 8);
    }
}
