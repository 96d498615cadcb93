//! Central finite-difference check of tape gradients.

use std::collections::BTreeMap;
use std::fmt;

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Scalar;
use crate::error::{Error, Result};

pub const MAX_GRADCHECK_PARAMS: usize = 10_000;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the per-block max relative error.
    pub tolerance: f64,
    /// Denominator floor: relative error is
    /// `|tape - fd| / max(|tape|, |fd|, floor)`.
    pub floor: f64,
}

impl GradcheckOptions {
    /// 64-bit defaults: step 1e-6, tolerance 1e-5.
    pub fn f64_default() -> Self {
        GradcheckOptions { step: 1e-6, tolerance: 1e-5, floor: 1e-3 }
    }

    /// 32-bit defaults: step 1e-3, tolerance 1e-2.
    pub fn f32_default() -> Self {
        GradcheckOptions { step: 1e-3, tolerance: 1e-2, floor: 1.0 }
    }

    pub fn with_tolerance(self, tolerance: f64) -> Self {
        GradcheckOptions { tolerance, ..self }
    }
}

#[derive(Debug, Clone)]
pub struct BlockError {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockError>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockError> {
        self.blocks.iter().filter(move |b| b.max_rel_err >= self.tolerance)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            let tag = if b.max_rel_err < self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{tag:4} {:40} n={:<6} rel={:.3e} abs={:.3e}", b.name, b.elements, b.max_rel_err, b.max_abs_err)?;
        }
        Ok(())
    }
}

/// Compares the tape gradient of the scalar built by `f` with central
/// differences for every parameter element.
pub fn gradcheck<S, F>(params: &ParamStore<S>, opts: GradcheckOptions, f: F) -> Result<GradcheckReport>
where
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, &Bound<'t, S>) -> Result<Var<'t, S>>,
{
    if params.numel() > MAX_GRADCHECK_PARAMS {
        return Err(Error::invalid(format!(
            "gradcheck fragment has {} parameters (limit {MAX_GRADCHECK_PARAMS})",
            params.numel()
        )));
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = f(&tape, &bound)?;
    tape.backward(loss)?;
    let analytic = tape.gradients();
    drop(bound);

    let eval = |p: &ParamStore<S>| -> Result<f64> {
        let tape = Tape::no_grad();
        let bound = p.bind(&tape);
        Ok(f(&tape, &bound)?.item().as_f64())
    };

    let mut work = params.clone();
    let mut blocks = Vec::with_capacity(params.len());
    let h = S::from_f64(opts.step);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let grad = &analytic[&name];
        let n = grad.len();
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for i in 0..n {
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * opts.step);
            let a = grad.data()[i].as_f64();
            let e = (a - fd).abs();
            abs = abs.max(e);
            rel = rel.max(e / a.abs().max(fd.abs()).max(opts.floor));
        }
        blocks.push(BlockError { name, elements: n, max_rel_err: rel, max_abs_err: abs });
    }
    Ok(GradcheckReport { tolerance: opts.tolerance, blocks })
}

/// Fixed random projection `sum(r * y)` turning a tensor output into a
/// scalar with a non-trivial gradient.
pub fn project<'t, S: Scalar>(tape: &'t Tape<S>, y: Var<'t, S>, seed: u64) -> Result<Var<'t, S>> {
    let mut rng = super::rng::RngState::new(seed);
    let r = tape.constant(rng.normal_tensor(&y.shape()));
    y.mul(r)?.sum()
}

/// Convenience for building parameter stores in tests and oracle suites.
pub fn store_from<S: Scalar>(items: Vec<(&str, super::tensor::Tensor<S>)>) -> ParamStore<S> {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>().into_iter().collect()
}
