//! Training configuration as `key=value` lines.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors. The
//! resolved form (every key, one per line) is written next to run outputs.

use std::fmt::Write as _;
use std::path::Path;

use crate::dualpath::RecVariant;
use crate::error::{Error, Result};
use crate::gcm::{EncodingMode, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Model preset name: `desk`, `full` or `tiny`.
    pub preset: String,
    pub side: usize,
    /// Weight of the reconstruction loss.
    pub lambda: f64,
    /// Learning rate of the backbone and the discriminator.
    pub lr_low: f64,
    /// Learning rate of every other generator part.
    pub lr_high: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub path_u: bool,
    pub path_s: bool,
    pub adv_u: bool,
    pub adv_s: bool,
    pub kld: bool,
    pub rec: bool,
    pub use_negatives: bool,
    pub rec_variant: RecVariant,
    pub encoding: EncodingMode,
    pub shared_encoding: bool,
    /// Generator adversarial term as `log(1 - D)` instead of `-log D`.
    pub saturating: bool,
    /// Stop latent-path gradients at the shared backbone.
    pub freeze_latent_backbone: bool,
    /// Draw the supervised latent from the posterior; otherwise use its mean.
    pub sample_latent: bool,
    pub bn_momentum: f64,
    /// Held-out scenes scored by the oracle after every epoch.
    pub probe_scenes: usize,
    /// Placements drawn per scene at evaluation.
    pub k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: "desk".into(),
            side: 64,
            lambda: 50.0,
            lr_low: 1e-4,
            lr_high: 1e-3,
            batch: 16,
            epochs: 10,
            seed: 0,
            path_u: true,
            path_s: true,
            adv_u: true,
            adv_s: true,
            kld: true,
            rec: true,
            use_negatives: true,
            rec_variant: RecVariant::L2Trig,
            encoding: EncodingMode::Both,
            shared_encoding: false,
            saturating: false,
            freeze_latent_backbone: false,
            sample_latent: true,
            bn_momentum: 0.1,
            probe_scenes: 50,
            k: 10,
        }
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value '{value}' for '{key}'"))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

impl TrainConfig {
    /// Learning rates of the full-size setting.
    pub fn full() -> Self {
        TrainConfig {
            preset: "full".into(),
            side: 256,
            lr_low: 2e-5,
            lr_high: 2e-4,
            batch: 32,
            ..Default::default()
        }
    }

    /// Supervised path only, reconstruction loss only, latent mean as code.
    pub fn overfit() -> Self {
        TrainConfig {
            path_u: false,
            adv_u: false,
            adv_s: false,
            kld: false,
            use_negatives: false,
            sample_latent: false,
            ..Default::default()
        }
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "preset" => {
                ModelConfig::preset(v)?;
                self.preset = v.to_string();
            }
            "side" => self.side = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "lr_low" => self.lr_low = parse(key, v)?,
            "lr_high" => self.lr_high = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "path_u" => self.path_u = parse(key, v)?,
            "path_s" => self.path_s = parse(key, v)?,
            "adv_u" => self.adv_u = parse(key, v)?,
            "adv_s" => self.adv_s = parse(key, v)?,
            "kld" => self.kld = parse(key, v)?,
            "rec" => self.rec = parse(key, v)?,
            "use_negatives" => self.use_negatives = parse(key, v)?,
            "rec_variant" => self.rec_variant = RecVariant::parse(v)?,
            "encoding" => self.encoding = EncodingMode::parse(v)?,
            "shared_encoding" => self.shared_encoding = parse(key, v)?,
            "saturating" => self.saturating = parse(key, v)?,
            "freeze_latent_backbone" => self.freeze_latent_backbone = parse(key, v)?,
            "sample_latent" => self.sample_latent = parse(key, v)?,
            "bn_momentum" => self.bn_momentum = parse(key, v)?,
            "probe_scenes" => self.probe_scenes = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{pair}'")))?;
        self.set(k, v)
    }

    /// Applies every `key=value` line of `text`. Does not validate.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                self.apply(line)?;
            }
        }
        Ok(())
    }

    /// Parses config text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.k == 0 {
            return Err(Error::Config("batch and k must be positive".into()));
        }
        if !(self.lr_low > 0.0 && self.lr_high > 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("learning rates must be positive and lambda non-negative".into()));
        }
        if !self.path_u && !self.path_s {
            return Err(Error::Config("at least one of path_u, path_s must be enabled".into()));
        }
        self.model_config()?.validate()
    }

    /// Model architecture implied by the preset and the overrides.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(&self.preset)?;
        m.side = self.side;
        m.encoding = self.encoding;
        m.shared_encoding = self.shared_encoding;
        Ok(m)
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("preset", self.preset.clone());
        kv("side", self.side.to_string());
        kv("lambda", self.lambda.to_string());
        kv("lr_low", self.lr_low.to_string());
        kv("lr_high", self.lr_high.to_string());
        kv("batch", self.batch.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("path_u", self.path_u.to_string());
        kv("path_s", self.path_s.to_string());
        kv("adv_u", self.adv_u.to_string());
        kv("adv_s", self.adv_s.to_string());
        kv("kld", self.kld.to_string());
        kv("rec", self.rec.to_string());
        kv("use_negatives", self.use_negatives.to_string());
        kv("rec_variant", self.rec_variant.name().to_string());
        kv("encoding", self.encoding.name().to_string());
        kv("shared_encoding", self.shared_encoding.to_string());
        kv("saturating", self.saturating.to_string());
        kv("freeze_latent_backbone", self.freeze_latent_backbone.to_string());
        kv("sample_latent", self.sample_latent.to_string());
        kv("bn_momentum", self.bn_momentum.to_string());
        kv("probe_scenes", self.probe_scenes.to_string());
        kv("k", self.k.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.lambda, 50.0);
        assert_eq!(c.batch, 16);
        assert_eq!(c.k, 10);
        assert_eq!(TrainConfig::full().lr_low, 2e-5);
        assert_eq!(TrainConfig::full().lr_high, 2e-4);
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = TrainConfig::default();
        c.apply("rec_variant=l1").unwrap();
        c.apply("encoding=key").unwrap();
        c.apply("lr_high=0.00031").unwrap();
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(TrainConfig::parse("lamda=3").is_err());
        assert!(TrainConfig::parse("batch=many").is_err());
        assert!(TrainConfig::parse("path_u=false\npath_s=false").is_err());
        assert!(TrainConfig::parse("# comment only\n\nseed=4 # trailing\n").is_ok());
    }
}
