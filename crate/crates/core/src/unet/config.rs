use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::ops::norm::default_groups;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Square input side length.
    pub resolution: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub res_blocks_per_level: usize,
    /// Feature-map side lengths at which self-attention is applied.
    pub attention_resolutions: BTreeSet<usize>,
    pub attention_heads: usize,
    pub time_embed_dim: usize,
    pub learned_variance: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            resolution: 32,
            base_channels: 32,
            channel_mult: vec![1, 2, 4],
            res_blocks_per_level: 2,
            attention_resolutions: [16, 8].into_iter().collect(),
            attention_heads: 4,
            time_embed_dim: 128,
            learned_variance: true,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    /// Side length at each encoder level.
    pub fn level_resolutions(&self) -> Vec<usize> {
        (0..self.levels()).map(|l| self.resolution >> l).collect()
    }

    pub fn out_channels(&self) -> usize {
        if self.learned_variance {
            2 * self.in_channels
        } else {
            self.in_channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels() == 0 {
            return bad("unet needs at least one level".into());
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.res_blocks_per_level == 0 {
            return bad("unet channel and block counts must be positive".into());
        }
        if self.channel_mult.contains(&0) {
            return bad("channel multipliers must be positive".into());
        }
        let div = 1usize << (self.levels() - 1);
        if self.resolution == 0 || !self.resolution.is_multiple_of(div) {
            return bad(format!("resolution {} not divisible by 2^(levels-1) = {div}", self.resolution));
        }
        let res = self.level_resolutions();
        if let Some(r) = self.attention_resolutions.iter().find(|r| !res.contains(r)) {
            return bad(format!("attention resolution {r} is not one of the level resolutions {res:?}"));
        }
        if !self.base_channels.is_multiple_of(2) {
            return bad("base_channels must be even (it sizes the sinusoidal embedding)".into());
        }
        if self.time_embed_dim == 0 {
            return bad("time_embed_dim must be positive".into());
        }
        for (l, &m) in self.channel_mult.iter().enumerate() {
            let c = m * self.base_channels;
            if !c.is_multiple_of(default_groups(c)) {
                return bad(format!("{c} channels at level {l} not divisible into norm groups"));
            }
            if self.attention_resolutions.contains(&res[l]) && (self.attention_heads == 0 || !c.is_multiple_of(self.attention_heads)) {
                return bad(format!("{} attention heads do not divide {c} channels", self.attention_heads));
            }
        }
        let mid = self.base_channels * self.channel_mult[self.levels() - 1];
        if self.attention_heads == 0 || !mid.is_multiple_of(self.attention_heads) {
            return bad(format!("{} attention heads do not divide the {mid} bottleneck channels", self.attention_heads));
        }
        if !self.base_channels.is_multiple_of(default_groups(self.base_channels)) {
            return bad("base_channels not divisible into norm groups".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        UNetConfig::default().validate().unwrap();
        assert_eq!(UNetConfig::default().level_resolutions(), vec![32, 16, 8]);
    }

    #[test]
    fn rejects_bad_configs() {
        let zero = UNetConfig { channel_mult: vec![], ..Default::default() };
        assert!(zero.validate().is_err());
        let attn = UNetConfig { attention_resolutions: [4].into_iter().collect(), ..Default::default() };
        assert!(attn.validate().is_err());
        let res = UNetConfig { resolution: 30, ..Default::default() };
        assert!(res.validate().is_err());
        let groups = UNetConfig { base_channels: 12, ..Default::default() };
        assert!(groups.validate().is_err());
    }
}
