//! Plain-text `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. [`RunConfig::echo`]
//! writes every key, and parsing the echo reproduces the same config.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::augment::AugConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::SgdConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub aug: AugConfig,
    pub sgd: SgdConfig,
    pub steps: u64,
    /// Samples per step; 0 means the whole training set.
    pub batch_size: usize,
    /// Checkpoint interval in steps; 0 saves only at the end.
    pub save_every: u64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            aug: AugConfig::default(),
            sgd: SgdConfig::default(),
            steps: 200,
            batch_size: 0,
            save_every: 50,
            seed: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "model.in_channels",
    "model.channels",
    "model.height",
    "model.width",
    "model.stride",
    "model.layers",
    "model.num_classes",
    "model.use_rgc",
    "model.encoder_blocks",
    "model.rgc_post_activation",
    "aug.enabled",
    "aug.max_rot_deg",
    "aug.flip_prob",
    "aug.scale_min",
    "aug.scale_max",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.steps",
    "train.batch_size",
    "train.save_every",
    "train.seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "model.in_channels" => m.in_channels = parse(key, value)?,
            "model.channels" => m.channels = parse(key, value)?,
            "model.height" => m.height = parse(key, value)?,
            "model.width" => m.width = parse(key, value)?,
            "model.stride" => m.stride = parse(key, value)?,
            "model.layers" => m.layers = parse(key, value)?,
            "model.num_classes" => m.num_classes = parse(key, value)?,
            "model.use_rgc" => m.use_rgc = parse(key, value)?,
            "model.encoder_blocks" => m.encoder_blocks = parse(key, value)?,
            "model.rgc_post_activation" => m.rgc_post_activation = parse(key, value)?,
            "aug.enabled" => m.use_aug = parse(key, value)?,
            "aug.max_rot_deg" => self.aug.max_rot_deg = parse(key, value)?,
            "aug.flip_prob" => self.aug.flip_prob = parse(key, value)?,
            "aug.scale_min" => self.aug.scale_min = parse(key, value)?,
            "aug.scale_max" => self.aug.scale_max = parse(key, value)?,
            "train.lr" => self.sgd.lr = parse(key, value)?,
            "train.momentum" => self.sgd.momentum = parse(key, value)?,
            "train.weight_decay" => self.sgd.weight_decay = parse(key, value)?,
            "train.steps" => self.steps = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.save_every" => self.save_every = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `text` on top of `self` and returns the keys it set.
    pub fn apply_text(&mut self, text: &str) -> Result<BTreeSet<String>> {
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            let k = k.trim();
            self.set(k, v.trim())?;
            seen.insert(k.to_string());
        }
        Ok(seen)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<(Self, BTreeSet<String>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        let seen = cfg.apply_text(&text)?;
        Ok((cfg, seen))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.aug.validate()?;
        self.sgd.validate()
    }

    /// Augmentation settings in effect: the configured ones when enabled,
    /// otherwise the identity.
    pub fn effective_aug(&self) -> AugConfig {
        if self.model.use_aug {
            self.aug
        } else {
            AugConfig::disabled()
        }
    }

    /// Every key in [`KEYS`] order.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let values: [String; 22] = [
            m.in_channels.to_string(),
            m.channels.to_string(),
            m.height.to_string(),
            m.width.to_string(),
            m.stride.to_string(),
            m.layers.to_string(),
            m.num_classes.to_string(),
            m.use_rgc.to_string(),
            m.encoder_blocks.to_string(),
            m.rgc_post_activation.to_string(),
            m.use_aug.to_string(),
            self.aug.max_rot_deg.to_string(),
            self.aug.flip_prob.to_string(),
            self.aug.scale_min.to_string(),
            self.aug.scale_max.to_string(),
            self.sgd.lr.to_string(),
            self.sgd.momentum.to_string(),
            self.sgd.weight_decay.to_string(),
            self.steps.to_string(),
            self.batch_size.to_string(),
            self.save_every.to_string(),
            self.seed.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// The echo as `# key=value` comment lines, for CSV report headers.
pub fn comment_block(cfg: &RunConfig) -> String {
    cfg.echo().lines().map(|l| format!("# {l}\n")).collect()
}

/// Parses the leading `#` comment lines of `text` back into a config.
pub fn parse_comment_block(text: &str) -> Result<RunConfig> {
    let body: String = text
        .lines()
        .map_while(|l| l.strip_prefix('#'))
        .map(|l| format!("{}\n", l.trim()))
        .collect();
    RunConfig::parse(&body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.sgd.lr = 0.1 + 0.2;
        cfg.aug.max_rot_deg = 1.0 / 3.0;
        cfg.model.use_rgc = false;
        cfg.seed = u64::MAX;
        assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
        assert_eq!(cfg.echo().lines().count(), KEYS.len());
    }

    #[test]
    fn comment_block_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.steps = 11;
        let text = format!("{}class,iou\nmean,0.5\n", comment_block(&cfg));
        assert_eq!(parse_comment_block(&text).unwrap(), cfg);
    }

    #[test]
    fn later_values_win_and_comments_skip() {
        let cfg = RunConfig::parse("# c\n\ntrain.steps = 3\ntrain.steps=7\n").unwrap();
        assert_eq!(cfg.steps, 7);
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::parse("train.lr=fast").unwrap_err().to_string();
        assert!(e.contains("train.lr"), "{e}");
        assert!(RunConfig::parse("nope=1").is_err());
        assert!(RunConfig::parse("justtext").is_err());
    }
}
