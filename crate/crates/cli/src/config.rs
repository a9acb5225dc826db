//! Flat `key = value` configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use sft_core::decompose::{ResidualMode, SplitPlan};
use sft_core::nn::{ModelConfig, OptimAlgorithm};

pub const MODEL_KEYS: &[&str] = &["vocab_size", "seq_len", "d_model", "ffn_dim", "n_blocks", "n_heads", "n_classes"];
pub const PLAN_KEYS: &[&str] = &["split_layer", "rank", "residual"];
pub const OPTIM_KEYS: &[&str] = &["optimizer", "lr", "beta1", "beta2", "eps", "momentum"];

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {line:?}", n + 1))?;
            let k = normalize(k);
            if k.is_empty() {
                bail!("line {}: empty key", n + 1);
            }
            s.values.insert(k, v.trim().to_owned());
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse_str(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Applies `--key value` and `--key=value` pairs on top of the file.
    /// A bare `--key` followed by another flag or nothing means `true`.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let body = arg
                .strip_prefix("--")
                .ok_or_else(|| anyhow!("expected --key value, got {arg:?}"))?;
            let (k, v) = match body.split_once('=') {
                Some((k, v)) => (k, v.to_owned()),
                None => match args.get(i + 1) {
                    Some(next) if !next.starts_with("--") => {
                        i += 1;
                        (body, next.clone())
                    }
                    _ => (body, "true".to_owned()),
                },
            };
            let k = normalize(k);
            if k.is_empty() {
                bail!("empty override key in {arg:?}");
            }
            self.values.insert(k, v);
            i += 1;
        }
        Ok(())
    }

    pub fn from_sources(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut s = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        s.apply_overrides(overrides)?;
        Ok(s)
    }

    /// Fails on the first key outside `allowed`.
    pub fn check_keys(&self, allowed: &[&[&str]]) -> Result<()> {
        for k in self.values.keys() {
            if !allowed.iter().any(|set| set.contains(&k.as_str())) {
                bail!("unknown key {k:?}");
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn opt<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("key {key}: cannot parse {v:?}: {e}")))
            .transpose()
    }

    pub fn get<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    pub fn require<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.opt(key)?.ok_or_else(|| anyhow!("missing required key {key}"))
    }

    pub fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" | "on" => Ok(true),
                "false" | "no" | "0" | "off" => Ok(false),
                _ => bail!("key {key}: expected a boolean, got {v:?}"),
            },
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            vocab_size: self.get("vocab_size", d.vocab_size)?,
            seq_len: self.get("seq_len", d.seq_len)?,
            d_model: self.get("d_model", d.d_model)?,
            ffn_dim: self.get("ffn_dim", d.ffn_dim)?,
            n_blocks: self.get("n_blocks", d.n_blocks)?,
            n_heads: self.get("n_heads", d.n_heads)?,
            n_classes: self.get("n_classes", d.n_classes)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Split plan; the block defaults to the last but one and the rank to 8.
    pub fn plan(&self, cfg: &ModelConfig) -> Result<SplitPlan> {
        let plan = SplitPlan::new(
            self.get("split_layer", cfg.n_blocks.saturating_sub(1).max(1))?,
            self.get("rank", 8usize.min(cfg.d_model))?,
            self.get("residual", ResidualMode::Eliminated)?,
        );
        plan.validate(cfg)?;
        Ok(plan)
    }

    pub fn optim(&self) -> Result<OptimAlgorithm> {
        let name = self.get("optimizer", "adam".to_owned())?;
        match name.to_ascii_lowercase().as_str() {
            "adam" => {
                let OptimAlgorithm::Adam { lr, beta1, beta2, eps } = OptimAlgorithm::default() else {
                    unreachable!("default optimizer is Adam")
                };
                Ok(OptimAlgorithm::Adam {
                    lr: self.get("lr", lr)?,
                    beta1: self.get("beta1", beta1)?,
                    beta2: self.get("beta2", beta2)?,
                    eps: self.get("eps", eps)?,
                })
            }
            "sgd" => Ok(OptimAlgorithm::Sgd {
                lr: self.get("lr", 1e-2)?,
                momentum: self.get("momentum", 0.0)?,
            }),
            other => bail!("key optimizer: unknown optimizer {other:?} (expected adam or sgd)"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn file_then_overrides() {
        let mut s = Settings::parse_str("# comment\n\nrank = 4\nsplit-layer=2\n").unwrap();
        s.apply_overrides(&args(&["--rank", "8", "--bandwidth-bps=1e6", "--decompose"])).unwrap();
        assert_eq!(s.get("rank", 0usize).unwrap(), 8);
        assert_eq!(s.get("split_layer", 0usize).unwrap(), 2);
        assert_eq!(s.get("bandwidth_bps", 0.0f64).unwrap(), 1e6);
        assert!(s.flag("decompose", false).unwrap());
    }

    #[test]
    fn bad_lines_and_values() {
        assert!(Settings::parse_str("no equals sign").is_err());
        assert!(Settings::parse_str(" = 3").is_err());
        let s = Settings::parse_str("rank = many").unwrap();
        assert!(s.get("rank", 0usize).is_err());
        assert!(Settings::default().apply_overrides(&args(&["rank"])).is_err());
    }

    #[test]
    fn unknown_keys_are_reported() {
        let s = Settings::parse_str("rank = 4\nrnak = 5").unwrap();
        let err = s.check_keys(&[PLAN_KEYS]).unwrap_err();
        assert!(err.to_string().contains("rnak"));
    }

    #[test]
    fn plan_defaults_follow_model() {
        let s = Settings::default();
        let cfg = s.model().unwrap();
        let plan = s.plan(&cfg).unwrap();
        assert_eq!((plan.split_layer, plan.rank, plan.residual), (3, 8, ResidualMode::Eliminated));
        let s = Settings::parse_str("rank = 33").unwrap();
        assert!(s.plan(&cfg).is_err());
    }
}
