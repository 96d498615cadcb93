use super::blocks::{conv, conv_specs, init_params, linear, linear_specs, norm, norm_specs, AttnBlock, ParamSpec, ResBlock};
use super::config::UNetConfig;
use super::embedding::timestep_batch;
use crate::error::{Error, Result};
use crate::numerics::ops::norm::default_groups;
use crate::numerics::ops::shape::concat;
use crate::numerics::{Bound, ParamStore, RngState, Scalar, Tape, Var};

#[derive(Debug, Clone)]
enum Stage {
    Res(ResBlock),
    Attn(AttnBlock),
    /// Stride-2 3x3 convolution.
    Down { prefix: String, ch: usize },
    /// Nearest-neighbour 2x followed by a 3x3 convolution.
    Up { prefix: String, ch: usize },
    /// Saves the current activation for the decoder.
    Push,
    /// Concatenates the most recent saved activation along channels.
    Pop,
}

/// Residual U-Net with self-attention and sinusoidal timestep conditioning.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    stages: Vec<Stage>,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let stages = plan(&config);
        for s in &stages {
            if let Stage::Res(r) = s {
                if r.in_ch % default_groups(r.in_ch) != 0 {
                    return Err(Error::Config(format!("{} input channels of {} not divisible into norm groups", r.in_ch, r.prefix)));
                }
            }
        }
        Ok(UNet { config, stages })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.config;
        let base = c.base_channels;
        let mut v = linear_specs("time.lin1", base, c.time_embed_dim);
        v.extend(linear_specs("time.lin2", c.time_embed_dim, c.time_embed_dim));
        v.extend(conv_specs("in.conv", c.in_channels, base, 3, false));
        for s in &self.stages {
            match s {
                Stage::Res(r) => v.extend(r.param_specs()),
                Stage::Attn(a) => v.extend(a.param_specs()),
                Stage::Down { prefix, ch } | Stage::Up { prefix, ch } => {
                    v.extend(conv_specs(&format!("{prefix}.conv"), *ch, *ch, 3, false))
                }
                Stage::Push | Stage::Pop => {}
            }
        }
        v.extend(norm_specs("out.norm", base));
        v.extend(conv_specs("out.conv", base, c.out_channels(), 3, true));
        v
    }

    /// Sorted `(name, shape)` list; a pure function of the config.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut m: Vec<_> = self.param_specs().into_iter().map(|p| (p.name, p.shape)).collect();
        m.sort();
        m
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    pub fn init<S: Scalar>(&self, rng: &mut RngState) -> ParamStore<S> {
        init_params(&self.param_specs(), rng)
    }

    /// Checks that `params` carries exactly this network's manifest.
    pub fn check_params<S: Scalar>(&self, params: &ParamStore<S>) -> Result<()> {
        if params.manifest() == self.manifest() {
            Ok(())
        } else {
            Err(Error::Config("parameter manifest does not match the network configuration".into()))
        }
    }

    /// `x: [B, C, H, W]`, one timestep per batch element. Returns
    /// `[B, C_out, H, W]`; with learned variance the first `C` channels are
    /// the noise prediction and the rest are variance interpolation logits.
    pub fn forward<'t, S: Scalar>(&self, tape: &'t Tape<S>, b: &Bound<'t, S>, x: Var<'t, S>, t: &[usize]) -> Result<Var<'t, S>> {
        let c = &self.config;
        let shape = x.shape();
        let expect = [shape.first().copied().unwrap_or(0), c.in_channels, c.resolution, c.resolution];
        if shape != expect {
            return Err(Error::shape("unet input", &shape, &expect));
        }
        if t.len() != shape[0] {
            return Err(Error::invalid(format!("{} timesteps for a batch of {}", t.len(), shape[0])));
        }
        let emb = tape.constant(timestep_batch::<S>(t, c.base_channels)?);
        let temb = linear(b, "time.lin1", emb)?.silu()?;
        let temb = linear(b, "time.lin2", temb)?.silu()?;

        let mut h = conv(b, "in.conv", x, 1, 1)?;
        let mut saved = Vec::new();
        for s in &self.stages {
            h = match s {
                Stage::Res(r) => r.forward(b, h, temb)?,
                Stage::Attn(a) => a.forward(b, h)?,
                Stage::Down { prefix, .. } => conv(b, &format!("{prefix}.conv"), h, 2, 1)?,
                Stage::Up { prefix, .. } => conv(b, &format!("{prefix}.conv"), h.upsample_nearest2x()?, 1, 1)?,
                Stage::Push => {
                    saved.push(h);
                    h
                }
                Stage::Pop => {
                    let skip = saved.pop().ok_or_else(|| Error::invalid("unet skip stack underflow"))?;
                    concat(tape, &[h, skip], 1)?
                }
            };
        }
        let h = norm(b, "out.norm", h, c.base_channels)?.silu()?;
        conv(b, "out.conv", h, 1, 1)
    }
}

fn plan(c: &UNetConfig) -> Vec<Stage> {
    let base = c.base_channels;
    let res = c.level_resolutions();
    let nres = c.res_blocks_per_level;
    let temb = c.time_embed_dim;
    let attn = |prefix: String, channels: usize| Stage::Attn(AttnBlock { prefix, channels, heads: c.attention_heads });
    let mut stages = vec![Stage::Push];
    let mut skip_ch = vec![base];
    let mut ch = base;

    for (l, &m) in c.channel_mult.iter().enumerate() {
        let out = m * base;
        for i in 0..nres {
            stages.push(Stage::Res(ResBlock { prefix: format!("down.{l}.res.{i}"), in_ch: ch, out_ch: out, temb_dim: temb }));
            ch = out;
            if c.attention_resolutions.contains(&res[l]) {
                stages.push(attn(format!("down.{l}.attn.{i}"), ch));
            }
            stages.push(Stage::Push);
            skip_ch.push(ch);
        }
        if l + 1 < c.levels() {
            stages.push(Stage::Down { prefix: format!("down.{l}.downsample"), ch });
            stages.push(Stage::Push);
            skip_ch.push(ch);
        }
    }

    stages.push(Stage::Res(ResBlock { prefix: "mid.res.0".into(), in_ch: ch, out_ch: ch, temb_dim: temb }));
    stages.push(attn("mid.attn".into(), ch));
    stages.push(Stage::Res(ResBlock { prefix: "mid.res.1".into(), in_ch: ch, out_ch: ch, temb_dim: temb }));

    for (l, &m) in c.channel_mult.iter().enumerate().rev() {
        let out = m * base;
        for i in 0..=nres {
            let skip = skip_ch.pop().expect("skip stack mirrors the encoder");
            stages.push(Stage::Pop);
            stages.push(Stage::Res(ResBlock { prefix: format!("up.{l}.res.{i}"), in_ch: ch + skip, out_ch: out, temb_dim: temb }));
            ch = out;
            if c.attention_resolutions.contains(&res[l]) {
                stages.push(attn(format!("up.{l}.attn.{i}"), ch));
            }
        }
        if l > 0 {
            stages.push(Stage::Up { prefix: format!("up.{l}.upsample"), ch });
        }
    }
    debug_assert!(skip_ch.is_empty());
    debug_assert_eq!(ch, base * c.channel_mult[0]);
    stages
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn small() -> UNetConfig {
        UNetConfig {
            resolution: 8,
            base_channels: 8,
            channel_mult: vec![1, 2],
            res_blocks_per_level: 1,
            attention_resolutions: [4].into_iter().collect(),
            attention_heads: 2,
            time_embed_dim: 16,
            ..Default::default()
        }
    }

    #[test]
    fn output_shape_and_head_starts_at_zero() {
        let net = UNet::new(small()).unwrap();
        let params = net.init::<f64>(&mut RngState::new(1));
        net.check_params(&params).unwrap();
        let tape = Tape::no_grad();
        let b = params.bind(&tape);
        let x = tape.constant(RngState::new(2).normal_tensor(&[2, 1, 8, 8]));
        let y = net.forward(&tape, &b, x, &[1, 500]).unwrap();
        assert_eq!(y.shape(), vec![2, 2, 8, 8]);
        assert_eq!(y.value().max_abs(), 0.0);
    }

    #[test]
    fn rejects_wrong_resolution_and_batch() {
        let net = UNet::new(small()).unwrap();
        let params = net.init::<f64>(&mut RngState::new(1));
        let tape = Tape::no_grad();
        let b = params.bind(&tape);
        let x = tape.constant(Tensor::zeros(&[1, 1, 16, 16]));
        assert!(net.forward(&tape, &b, x, &[1]).is_err());
        let x = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
        assert!(net.forward(&tape, &b, x, &[1, 2]).is_err());
    }

    #[test]
    fn manifest_is_deterministic_and_names_unique() {
        let a = UNet::new(UNetConfig::default()).unwrap();
        let b = UNet::new(UNetConfig::default()).unwrap();
        assert_eq!(a.manifest(), b.manifest());
        assert_eq!(a.param_count(), b.param_count());
        let names: std::collections::BTreeSet<_> = a.param_specs().into_iter().map(|p| p.name).collect();
        assert_eq!(names.len(), a.param_specs().len());
    }
}
