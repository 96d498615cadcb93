use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::{gemm, MatRef, Scalar, Tensor};

impl<'t, S: Scalar> Var<'t, S> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), out.data_mut(), false);
        self.tape().record("matmul", out, &[self, rhs], move |g| {
            let mut da = Tensor::zeros(&[m, k]);
            let mut db = Tensor::zeros(&[k, n]);
            gemm(MatRef::new(g.data(), m, n), MatRef::new(b.data(), k, n).t(), da.data_mut(), false);
            gemm(MatRef::new(a.data(), m, k).t(), MatRef::new(g.data(), m, n), db.data_mut(), false);
            vec![Some(da), Some(db)]
        })
    }

    /// `x [n, in] * w [in, out] + b [out]`.
    pub fn linear(self, w: Var<'t, S>, b: Var<'t, S>) -> Result<Var<'t, S>> {
        let out = b.shape()[0];
        self.matmul(w)?.add(b.reshape(&[1, out])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    #[test]
    fn identity_is_neutral() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(vec![2, 2], &[1., 2., 3., 4.]).unwrap());
        let i = tape.constant(Tensor::from_f64(vec![2, 2], &[1., 0., 0., 1.]).unwrap());
        assert_eq!(a.matmul(i).unwrap().value().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn inner_extent_mismatch() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(a.matmul(a).is_err());
    }
}
