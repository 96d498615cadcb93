//! Residual and self-attention blocks.

use crate::error::Result;
use crate::numerics::ops::norm::default_groups;
use crate::numerics::{Bound, Conv2dSpec, ParamStore, RngState, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with standard deviation `1 / sqrt(fan_in)`.
    FanIn(usize),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec { name, shape, init }
    }
}

pub fn init_params<S: Scalar>(specs: &[ParamSpec], rng: &mut RngState) -> ParamStore<S> {
    let mut store = ParamStore::new();
    for p in specs {
        let t = match p.init {
            Init::Zeros => Tensor::zeros(&p.shape),
            Init::Ones => Tensor::ones(&p.shape),
            Init::FanIn(fan) => rng.normal_tensor::<S>(&p.shape).scale(S::from_f64(1.0 / (fan as f64).sqrt())),
        };
        store.insert(p.name.clone(), t);
    }
    store
}

pub(crate) fn conv_specs(prefix: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Vec<ParamSpec> {
    let init = if zero { Init::Zeros } else { Init::FanIn(cin * k * k) };
    vec![
        ParamSpec::new(format!("{prefix}.w"), vec![cout, cin, k, k], init),
        ParamSpec::new(format!("{prefix}.b"), vec![cout], Init::Zeros),
    ]
}

pub(crate) fn norm_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.g"), vec![c], Init::Ones),
        ParamSpec::new(format!("{prefix}.b"), vec![c], Init::Zeros),
    ]
}

pub(crate) fn linear_specs(prefix: &str, fan_in: usize, fan_out: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.w"), vec![fan_in, fan_out], Init::FanIn(fan_in)),
        ParamSpec::new(format!("{prefix}.b"), vec![fan_out], Init::Zeros),
    ]
}

pub(crate) fn conv<'t, S: Scalar>(b: &Bound<'t, S>, prefix: &str, x: Var<'t, S>, stride: usize, padding: usize) -> Result<Var<'t, S>> {
    x.conv2d(b.get(&format!("{prefix}.w"))?, Some(b.get(&format!("{prefix}.b"))?), Conv2dSpec { stride, padding })
}

pub(crate) fn norm<'t, S: Scalar>(b: &Bound<'t, S>, prefix: &str, x: Var<'t, S>, channels: usize) -> Result<Var<'t, S>> {
    x.group_norm(b.get(&format!("{prefix}.g"))?, b.get(&format!("{prefix}.b"))?, default_groups(channels))
}

pub(crate) fn linear<'t, S: Scalar>(b: &Bound<'t, S>, prefix: &str, x: Var<'t, S>) -> Result<Var<'t, S>> {
    x.linear(b.get(&format!("{prefix}.w"))?, b.get(&format!("{prefix}.b"))?)
}

/// `x + conv(silu(norm(conv(silu(norm(x)))) * (1 + scale) + shift))` where
/// `(scale, shift)` is a projection of the time embedding, with a 1x1
/// projection on the skip path when the channel count changes. The second
/// convolution starts at zero, so a fresh block is the identity (or the skip
/// projection).
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub temb_dim: usize,
}

impl ResBlock {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let p = &self.prefix;
        let mut v = norm_specs(&format!("{p}.norm1"), self.in_ch);
        v.extend(conv_specs(&format!("{p}.conv1"), self.in_ch, self.out_ch, 3, false));
        v.extend(linear_specs(&format!("{p}.temb"), self.temb_dim, 2 * self.out_ch));
        v.extend(norm_specs(&format!("{p}.norm2"), self.out_ch));
        v.extend(conv_specs(&format!("{p}.conv2"), self.out_ch, self.out_ch, 3, true));
        if self.in_ch != self.out_ch {
            v.extend(conv_specs(&format!("{p}.skip"), self.in_ch, self.out_ch, 1, false));
        }
        v
    }

    /// `temb` is the activated time embedding `[B, temb_dim]`.
    pub fn forward<'t, S: Scalar>(&self, b: &Bound<'t, S>, x: Var<'t, S>, temb: Var<'t, S>) -> Result<Var<'t, S>> {
        let p = &self.prefix;
        let batch = x.shape()[0];
        let h = norm(b, &format!("{p}.norm1"), x, self.in_ch)?.silu()?;
        let h = conv(b, &format!("{p}.conv1"), h, 1, 1)?;
        let t = linear(b, &format!("{p}.temb"), temb)?.reshape(&[batch, 2, self.out_ch, 1, 1])?;
        let scale = t.narrow(1, 0, 1)?.reshape(&[batch, self.out_ch, 1, 1])?.add_scalar(1.0)?;
        let shift = t.narrow(1, 1, 1)?.reshape(&[batch, self.out_ch, 1, 1])?;
        let h = norm(b, &format!("{p}.norm2"), h, self.out_ch)?.mul(scale)?.add(shift)?.silu()?;
        let h = conv(b, &format!("{p}.conv2"), h, 1, 1)?;
        let skip = if self.in_ch != self.out_ch { conv(b, &format!("{p}.skip"), x, 1, 0)? } else { x };
        skip.add(h)
    }
}

/// Multi-head self-attention over spatial positions with a residual
/// connection; the output projection starts at zero.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub prefix: String,
    pub channels: usize,
    pub heads: usize,
}

impl AttnBlock {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (p, c) = (&self.prefix, self.channels);
        let mut v = norm_specs(&format!("{p}.norm"), c);
        v.extend(conv_specs(&format!("{p}.qkv"), c, 3 * c, 1, false));
        v.extend(conv_specs(&format!("{p}.proj"), c, c, 1, true));
        v
    }

    pub fn forward<'t, S: Scalar>(&self, b: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let p = &self.prefix;
        let s = x.shape();
        let (batch, c, n) = (s[0], s[1], s[2] * s[3]);
        let d = c / self.heads;
        let h = norm(b, &format!("{p}.norm"), x, c)?;
        let qkv = conv(b, &format!("{p}.qkv"), h, 1, 0)?.reshape(&[batch, 3, self.heads * d * n])?;
        let part = |i: usize| qkv.narrow(1, i, 1)?.reshape(&[batch * self.heads, d, n]);
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let a = q.attention(k, v)?.reshape(&s)?;
        let out = conv(b, &format!("{p}.proj"), a, 1, 0)?;
        x.add(out)
    }
}
