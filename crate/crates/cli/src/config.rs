//! `key = value` run configuration with `[section]` headers.
//!
//! Every key a command understands is declared in [`SCHEMA`] with its
//! default; anything else is an error. The resolved configuration (defaults,
//! file, then flag overrides) is written next to each command's outputs and
//! can be fed back with `--config` to repeat the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

pub const RESOLVED_FILE: &str = "run.conf";

/// `(section, key, default)`; an empty default means "unset".
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("run", "seed", ""),
    ("run", "workers", "1"),
    ("run", "out", ""),
    ("data", "task", "source"),
    ("data", "per_class", "100"),
    ("data", "resolution", "32"),
    ("data", "duration", "0.016"),
    ("data", "nfft", "64"),
    ("data", "hop", "64"),
    ("data", "window", "hann"),
    ("data", "dyn_range_db", "40"),
    ("model", "base_channels", "32"),
    ("model", "channel_mult", "1,2,4"),
    ("model", "res_blocks", "2"),
    ("model", "attention_resolutions", "16,8"),
    ("model", "attention_heads", "4"),
    ("model", "time_embed_dim", "128"),
    ("diffusion", "timesteps", "1000"),
    ("diffusion", "beta_start", "0.0001"),
    ("diffusion", "beta_end", "0.02"),
    ("diffusion", "variance_mode", "learned_interp"),
    ("diffusion", "vlb_weight", "0.001"),
    ("train", "data", ""),
    ("train", "steps", "3000"),
    ("train", "batch_size", "16"),
    ("train", "lr", "0.0001"),
    ("train", "lr_min", "0"),
    ("train", "weight_decay", "0"),
    ("train", "ema_decay", "0.999"),
    ("train", "val_fraction", "0.1"),
    ("train", "val_interval", "250"),
    ("train", "checkpoint_interval", "500"),
    ("train", "log_interval", "100"),
    ("sample", "checkpoint", ""),
    ("sample", "count", "16"),
    ("sample", "batch", "64"),
    ("sample", "ema", "true"),
    ("eval", "generated", ""),
    ("eval", "reference", ""),
    ("eval", "k", "3"),
    ("eval", "window", "7"),
    ("eval", "k1", "0.01"),
    ("eval", "k2", "0.03"),
    ("eval", "dynamic_range", "1"),
    ("eval", "probe_data", ""),
    ("eval", "probe_epochs", "30"),
    ("transfer", "source", ""),
    ("transfer", "target", ""),
    ("transfer", "seeds", "3"),
    ("transfer", "source_epochs", "30"),
    ("transfer", "target_epochs", "100"),
    ("transfer", "batch_size", "16"),
    ("transfer", "lr", "0.001"),
    ("transfer", "finetune_factor", "0.1"),
    ("transfer", "val_fraction", "0.2"),
    ("transfer", "criterion", "0.95"),
    ("transfer", "scratch_only", "false"),
    ("verify", "filter", ""),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<(String, String), String>,
}

fn known(section: &str, key: &str) -> bool {
    SCHEMA.iter().any(|(s, k, _)| *s == section && *k == key)
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: SCHEMA.iter().map(|(s, k, v)| ((s.to_string(), k.to_string()), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `text`. Lines are `[section]`, `key = value`,
    /// blank, or `#` comments; keys before any header are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let at = || format!("line {}", no + 1);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| anyhow!("{}: unterminated section header", at()))?.trim();
                if !SCHEMA.iter().any(|(s, _, _)| *s == name) {
                    bail!("{}: unknown section [{name}]", at());
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| anyhow!("{}: expected `key = value`", at()))?;
            let sec = section.as_deref().ok_or_else(|| anyhow!("{}: `{}` outside any [section]", at(), key.trim()))?;
            cfg.set(sec, key.trim(), value.trim()).with_context(at)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) -> Result<()> {
        if !known(section, key) {
            bail!("unknown config key `{key}` in [{section}]");
        }
        self.values.insert((section.into(), key.into()), value.into());
        Ok(())
    }

    /// Applies a flag value when one was given.
    pub fn apply<T: ToString>(&mut self, section: &str, key: &str, flag: Option<T>) -> Result<()> {
        match flag {
            Some(v) => self.set(section, key, v.to_string()),
            None => Ok(()),
        }
    }

    pub fn raw(&self, section: &str, key: &str) -> &str {
        self.values.get(&(section.to_string(), key.to_string())).map_or("", String::as_str)
    }

    /// Parsed value; an unset key is an error naming the flag or key.
    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(section, key);
        if raw.is_empty() {
            return Err(crate::Usage(format!("`{key}` is required (flag --{} or [{section}] {key})", key.replace('_', "-"))).into());
        }
        raw.parse().map_err(|e| anyhow!("[{section}] {key} = `{raw}`: {e}"))
    }

    pub fn get_opt<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(section, key).is_empty() {
            Ok(None)
        } else {
            self.get(section, key).map(Some)
        }
    }

    pub fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(section, key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| anyhow!("[{section}] {key}: `{s}`: {e}")))
            .collect()
    }

    /// Only the given sections, in schema order; unset keys are kept as
    /// empty values so the file documents every knob.
    pub fn render(&self, sections: &[&str]) -> String {
        let mut out = String::new();
        for sec in sections {
            let _ = writeln!(out, "[{sec}]");
            for (s, k, _) in SCHEMA.iter().filter(|(s, _, _)| s == sec) {
                let _ = writeln!(out, "{k} = {}", self.raw(s, k));
            }
            out.push('\n');
        }
        out
    }

    /// Writes `run.conf` into `dir`. `[run] out` is left blank: it is the
    /// directory holding the file, and omitting it keeps reruns into fresh
    /// directories byte-identical.
    pub fn write(&self, dir: &Path, sections: &[&str]) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_FILE);
        let mut c = self.clone();
        c.values.insert(("run".into(), "out".into()), String::new());
        std::fs::write(&path, c.render(sections)).with_context(|| format!("writing {}", path.display()))
    }
}
