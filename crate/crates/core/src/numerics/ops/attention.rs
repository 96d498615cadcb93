use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::{gemm, MatRef, Scalar, Tensor};

/// Row-softmaxed `q^T k / sqrt(d)` for channel-major `q`, `k` of one group
/// (`[d, n]` each); returns `[n, n]` with rows indexing queries.
pub fn attention_weights<S: Scalar>(q: &[S], k: &[S], d: usize, n: usize) -> Vec<S> {
    let mut p = vec![S::zero(); n * n];
    gemm(MatRef::new(q, d, n).t(), MatRef::new(k, d, n), &mut p, false);
    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    for row in p.chunks_mut(n) {
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v * scale));
        let mut z = S::zero();
        for v in row.iter_mut() {
            *v = (*v * scale - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    p
}

impl<'t, S: Scalar> Var<'t, S> {
    /// Scaled dot-product attention over channel-major groups: `self` (queries),
    /// `k`, `v` are `[G, d, N]`; output is `[G, d, N]`.
    pub fn attention(self, k: Var<'t, S>, v: Var<'t, S>) -> Result<Var<'t, S>> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let qs = qv.shape().to_vec();
        if qs.len() != 3 {
            return Err(Error::invalid(format!("attention expects [G, d, N], got {qs:?}")));
        }
        for other in [kv.shape(), vv.shape()] {
            if other != qs.as_slice() {
                return Err(Error::shape("attention", &qs, other));
            }
        }
        let (groups, d, n) = (qs[0], qs[1], qs[2]);
        let stride = d * n;
        let mut out = Tensor::zeros(&qs);
        let mut probs = Vec::with_capacity(groups * n * n);
        for gi in 0..groups {
            let r = gi * stride..(gi + 1) * stride;
            let p = attention_weights(&qv.data()[r.clone()], &kv.data()[r.clone()], d, n);
            gemm(MatRef::new(&vv.data()[r.clone()], d, n), MatRef::new(&p, n, n).t(), &mut out.data_mut()[r], false);
            probs.extend_from_slice(&p);
        }
        let scale = S::from_f64(1.0 / (d as f64).sqrt());
        self.tape().record("attention", out, &[self, k, v], move |g| {
            let mut dq = Tensor::zeros(&qs);
            let mut dk = Tensor::zeros(&qs);
            let mut dv = Tensor::zeros(&qs);
            let mut dp = vec![S::zero(); n * n];
            for gi in 0..groups {
                let r = gi * stride..(gi + 1) * stride;
                let p = &probs[gi * n * n..(gi + 1) * n * n];
                let go = &g.data()[r.clone()];
                gemm(MatRef::new(go, d, n), MatRef::new(p, n, n), &mut dv.data_mut()[r.clone()], false);
                gemm(MatRef::new(go, d, n).t(), MatRef::new(&vv.data()[r.clone()], d, n), &mut dp, false);
                for (prow, drow) in p.chunks(n).zip(dp.chunks_mut(n)) {
                    let dot: S = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv_, &pv) in drow.iter_mut().zip(prow) {
                        *dv_ = pv * (*dv_ - dot) * scale;
                    }
                }
                gemm(MatRef::new(&kv.data()[r.clone()], d, n), MatRef::new(&dp, n, n).t(), &mut dq.data_mut()[r.clone()], false);
                gemm(MatRef::new(&qv.data()[r.clone()], d, n), MatRef::new(&dp, n, n), &mut dk.data_mut()[r], false);
            }
            vec![Some(dq), Some(dk), Some(dv)]
        })
    }
}
