use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal embedding of `t`: `dim / 2` sines followed by `dim / 2`
/// cosines at frequencies spaced geometrically from 1 down to 1/10000.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("timestep embedding dim must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let freq = |i: usize| {
        if half == 1 {
            1.0
        } else {
            MAX_PERIOD.powf(-(i as f64) / (half - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|i| (t * freq(i)).sin()));
    out.extend((0..half).map(|i| (t * freq(i)).cos()));
    Ok(out)
}

/// `[B, dim]` embedding of a batch of timesteps.
pub fn timestep_batch<S: Scalar>(ts: &[usize], dim: usize) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(timestep_embedding(t as f64, dim)?.into_iter().map(S::from_f64));
    }
    Tensor::new(vec![ts.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time_is_sin0_cos1() {
        let e = timestep_embedding(0.0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(timestep_embedding(1.0, 7).is_err());
    }

    #[test]
    fn injective_over_schedule_and_bounded() {
        let dim = 32;
        let embs: Vec<Vec<f64>> = (1..=1000).map(|t| timestep_embedding(t as f64, dim).unwrap()).collect();
        let mut min_d2 = f64::INFINITY;
        for i in 0..embs.len() {
            let norm2: f64 = embs[i].iter().map(|v| v * v).sum();
            assert!(norm2.sqrt() <= (dim as f64).sqrt() + 1e-12);
            for j in i + 1..embs.len() {
                let d2: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                min_d2 = min_d2.min(d2);
            }
        }
        assert!(min_d2 > 1e-6, "closest pair distance^2 {min_d2}");
    }
}
