use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{numel, Scalar, Tensor};

/// (outer, axis, inner) extents around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, S>> {
        let xv = self.value();
        let old = xv.shape().to_vec();
        let out = (*xv).clone().reshape(shape)?;
        self.tape().record("reshape", out, &[self], move |g| {
            vec![Some(g.clone().reshape(&old).unwrap())]
        })
    }

    /// Contiguous slice `start..start + len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, S>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow axis {axis} range {start}..{} on shape {shape:?}",
                start + len
            )));
        }
        let (outer, ax, inner) = split_at_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ax + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let out = Tensor::new(out_shape, out)?;
        self.tape().record("narrow", out, &[self], move |g| {
            let mut dx = Tensor::zeros(&shape);
            let gd = g.data();
            let dd = dx.data_mut();
            for o in 0..outer {
                let base = (o * ax + start) * inner;
                dd[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        })
    }
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<'t, S: Scalar>(tape: &'t Tape<S>, parts: &[Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let base_shape = first.shape();
    if axis >= base_shape.len() {
        return Err(Error::invalid(format!("concat axis {axis} on rank {}", base_shape.len())));
    }
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let mut sizes = Vec::with_capacity(parts.len());
    for v in &values {
        let s = v.shape();
        let same = s.len() == base_shape.len()
            && s.iter().zip(&base_shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(Error::shape("concat", &base_shape, s));
        }
        sizes.push(s[axis]);
    }
    let total: usize = sizes.iter().sum();
    let mut out_shape = base_shape.clone();
    out_shape[axis] = total;
    let (outer, _, inner) = split_at_axis(&out_shape, axis);
    let mut out = Vec::with_capacity(numel(&out_shape));
    for o in 0..outer {
        for (v, &n) in values.iter().zip(&sizes) {
            out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let out = Tensor::new(out_shape, out)?;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    tape.record("concat", out, parts, move |g| {
        let gd = g.data();
        let mut grads: Vec<Vec<S>> = sizes.iter().map(|&n| Vec::with_capacity(outer * n * inner)).collect();
        let mut off = 0;
        for _ in 0..outer {
            for (gi, &n) in grads.iter_mut().zip(&sizes) {
                gi.extend_from_slice(&gd[off..off + n * inner]);
                off += n * inner;
            }
        }
        grads
            .into_iter()
            .zip(&shapes)
            .map(|(d, s)| Some(Tensor::new(s.clone(), d).unwrap()))
            .collect()
    })
}
