//! Flat `section.key = value` run configuration.
//!
//! ```text
//! # comment
//! model.width1 = 32
//! train.epochs = 50
//! data.artifacts = heavy
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{ArtifactLevel, SplitSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Synthetic-data generation and splitting.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub artifacts: ArtifactLevel,
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 42,
            count: 300,
            size: 64,
            artifacts: ArtifactLevel::Normal,
            split: SplitSpec {
                train: 0.8,
                val: 0.1,
                test: 0.1,
                seed: 42,
            },
        }
    }
}

impl DataConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "count",
        "size",
        "artifacts",
        "split.train",
        "split.val",
        "split.test",
        "split.seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `data.{key}`")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "count" => self.count = num(key, value)?,
            "size" => self.size = num(key, value)?,
            "artifacts" => self.artifacts = value.parse()?,
            "split.train" => self.split.train = num(key, value)?,
            "split.val" => self.split.val = num(key, value)?,
            "split.test" => self.split.test = num(key, value)?,
            "split.seed" => self.split.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown data key `{key}`"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets a fully qualified key such as `model.width1` or `train.lr0`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key `{key}`"));
        let (section, rest) = key.split_once('.').ok_or_else(unknown)?;
        let known = match section {
            "model" => ModelConfig::KEYS.contains(&rest) || is_indexed(rest),
            "train" => TrainConfig::KEYS.contains(&rest),
            "data" => DataConfig::KEYS.contains(&rest),
            _ => false,
        };
        if !known {
            return Err(unknown());
        }
        match section {
            "model" => self.model.set(rest, value),
            "train" => self.train.set(rest, value),
            _ => self.data.set(rest, value),
        }
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.model.to_pairs() {
            let _ = writeln!(s, "model.{k} = {v}");
        }
        let t = &self.train;
        let clip = t.grad_clip.map_or("none".to_string(), |c| c.to_string());
        for (k, v) in [
            ("lr0", t.lr0.to_string()),
            ("lr_min", t.lr_min.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("grad_clip", clip),
            ("augment", t.augment.to_string()),
            ("threshold", t.threshold.to_string()),
            ("loss.dice", t.loss.dice.to_string()),
            ("loss.bce", t.loss.bce.to_string()),
            ("loss.edge", t.loss.edge.to_string()),
            ("loss.epsilon", t.loss.epsilon.to_string()),
            ("loss.edge_radius", t.loss.edge_radius.to_string()),
            ("loss.edge_weight", t.loss.edge_weight.to_string()),
        ] {
            let _ = writeln!(s, "train.{k} = {v}");
        }
        let d = &self.data;
        for (k, v) in [
            ("seed", d.seed.to_string()),
            ("count", d.count.to_string()),
            ("size", d.size.to_string()),
            ("artifacts", d.artifacts.to_string()),
            ("split.train", d.split.train.to_string()),
            ("split.val", d.split.val.to_string()),
            ("split.test", d.split.test.to_string()),
            ("split.seed", d.split.seed.to_string()),
        ] {
            let _ = writeln!(s, "data.{k} = {v}");
        }
        s
    }
}

fn is_indexed(key: &str) -> bool {
    ["width", "blocks"].iter().any(|p| {
        key.strip_prefix(p)
            .is_some_and(|i| matches!(i, "1" | "2" | "3" | "4"))
    })
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
