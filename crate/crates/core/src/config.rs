//! Training configuration: a flat `key = value` file format whose echo is
//! itself a valid config file, so any run can be reproduced from its log
//! header alone.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Hidden-channel scale of the network (1.0 = reference widths).
    pub width_multiplier: f64,
    pub batch_size: usize,
    /// Square crop fed to the network; must be a multiple of 4.
    pub crop_size: usize,
    pub base_lr: f64,
    pub iterations: u64,
    /// Emit a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Random horizontal flips of each crop.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            width_multiplier: 1.0,
            batch_size: 10,
            crop_size: 256,
            base_lr: 0.001,
            iterations: 100_000,
            checkpoint_every: 10_000,
            seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    /// Keys in echo order. One place to keep parser, echo, and docs aligned.
    const KEYS: [&'static str; 8] = [
        "width_multiplier",
        "batch_size",
        "crop_size",
        "base_lr",
        "iterations",
        "checkpoint_every",
        "seed",
        "augment",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("key `{key}`: invalid {what} `{value}`"));
        match key {
            "width_multiplier" => {
                self.width_multiplier = value.parse().map_err(|_| bad("number"))?
            }
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("integer"))?,
            "crop_size" => self.crop_size = value.parse().map_err(|_| bad("integer"))?,
            "base_lr" => self.base_lr = value.parse().map_err(|_| bad("number"))?,
            "iterations" => self.iterations = value.parse().map_err(|_| bad("integer"))?,
            "checkpoint_every" => {
                self.checkpoint_every = value.parse().map_err(|_| bad("integer"))?
            }
            "seed" => self.seed = value.parse().map_err(|_| bad("integer"))?,
            "augment" => self.augment = value.parse().map_err(|_| bad("boolean"))?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}` (known: {})",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "width_multiplier" => self.width_multiplier.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "crop_size" => self.crop_size.to_string(),
            "base_lr" => self.base_lr.to_string(),
            "iterations" => self.iterations.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "seed" => self.seed.to_string(),
            "augment" => self.augment.to_string(),
            _ => unreachable!("get() is only called with KEYS entries"),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped. Settings apply on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::Config(format!(
                "width_multiplier must be positive and finite, got {}",
                self.width_multiplier
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.crop_size == 0 || self.crop_size % 4 != 0 {
            return Err(Error::Config(format!(
                "crop_size must be a positive multiple of 4, got {}",
                self.crop_size
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!(
                "base_lr must be positive and finite, got {}",
                self.base_lr
            )));
        }
        Ok(())
    }

    /// The canonical textual form: parsing the echo reproduces the config
    /// exactly, byte for byte.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            writeln!(out, "{key} = {}", self.get(key)).expect("writing to String");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_round_trip() {
        let cfg = TrainConfig::default();
        let echoed = cfg.echo();
        let reparsed = TrainConfig::parse(&echoed).unwrap();
        assert_eq!(cfg, reparsed);
        assert_eq!(echoed, reparsed.echo(), "echo must be a fixed point");
    }

    #[test]
    fn parse_applies_overrides_comments_and_blanks() {
        let text = "# training setup\n\nwidth_multiplier = 0.125\nbatch_size=2  # inline comment\n  seed = 99\naugment = true\n";
        let cfg = TrainConfig::parse(text).unwrap();
        assert_eq!(cfg.width_multiplier, 0.125);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.seed, 99);
        assert!(cfg.augment);
        assert_eq!(cfg.crop_size, 256, "untouched keys keep defaults");
    }

    #[test]
    fn parse_rejects_unknown_keys_and_bad_values() {
        let err = TrainConfig::parse("learning_rate = 0.1").unwrap_err().to_string();
        assert!(err.contains("unknown key `learning_rate`"), "got: {err}");
        let err = TrainConfig::parse("batch_size = many").unwrap_err().to_string();
        assert!(err.contains("invalid integer `many`"), "got: {err}");
        let err = TrainConfig::parse("just some words").unwrap_err().to_string();
        assert!(err.contains("line 1"), "got: {err}");
    }

    #[test]
    fn validate_catches_degenerate_settings() {
        let mut cfg = TrainConfig::default();
        cfg.crop_size = 30;
        assert!(cfg.validate().is_err(), "crop must be a multiple of 4");
        cfg.crop_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.base_lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.width_multiplier = -0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn float_echo_survives_round_trip_exactly() {
        let mut cfg = TrainConfig::default();
        cfg.width_multiplier = 1.0 / 8.0;
        cfg.base_lr = 0.00075;
        let reparsed = TrainConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(cfg.width_multiplier.to_bits(), reparsed.width_multiplier.to_bits());
        assert_eq!(cfg.base_lr.to_bits(), reparsed.base_lr.to_bits());
    }
}
