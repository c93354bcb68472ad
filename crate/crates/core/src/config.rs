//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::pipeline::{PipelineConfig, Variant};
use crate::train::{Optimizer, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Small,
}

impl Preset {
    pub fn pipeline(self) -> PipelineConfig {
        match self {
            Preset::Tiny => PipelineConfig::tiny(),
            Preset::Small => PipelineConfig::small(),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            _ => Err(Error::Config(format!("unknown preset `{s}` (tiny, small)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (sgd, adam)"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Everything a training or inference run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub variant: Variant,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub lambda: f64,
    pub mu: [f64; 3],
    pub eps: f64,
    pub manifest: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            seed: 0,
            preset: Preset::Tiny,
            variant: Variant::Full,
            steps: 200,
            batch_size: 2,
            lr: 1e-3,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            clip_norm: None,
            lambda: loss.lambda,
            mu: loss.mu,
            eps: loss.eps,
            manifest: None,
            checkpoint: PathBuf::from("prism.ckpt"),
            loss_log: PathBuf::from("loss.csv"),
        }
    }
}

pub const KEYS: [&str; 15] = [
    "seed",
    "preset",
    "variant",
    "steps",
    "batch_size",
    "lr",
    "optimizer",
    "momentum",
    "clip_norm",
    "lambda",
    "mu",
    "eps",
    "manifest",
    "checkpoint",
    "loss_log",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, value)?,
            "preset" => self.preset = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "momentum" => self.momentum = parse(key, value)?,
            "clip_norm" => {
                self.clip_norm = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "lambda" => self.lambda = parse(key, value)?,
            "mu" => {
                let parts: Vec<f64> = value.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                self.mu = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("`mu` needs three comma-separated values, got `{value}`")))?;
            }
            "eps" => self.eps = parse(key, value)?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "loss_log" => self.loss_log = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not `key=value`")))?;
        self.set(k, v)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        self.preset.pipeline().with_variant(self.variant)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            mu: self.mu,
            eps: self.eps,
            ..LossConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: match self.optimizer {
                OptimizerKind::Sgd => Optimizer::Sgd { momentum: self.momentum },
                OptimizerKind::Adam => Optimizer::adam(),
            },
            clip_norm: self.clip_norm,
            seed: self.seed,
            loss: self.loss(),
        }
    }
}

/// The fully resolved configuration in the same `key = value` syntax it is
/// parsed from.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "preset = {}", self.preset)?;
        writeln!(f, "variant = {}", self.variant.name())?;
        writeln!(f, "steps = {}", self.steps)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "optimizer = {}", self.optimizer)?;
        writeln!(f, "momentum = {}", self.momentum)?;
        match self.clip_norm {
            Some(c) => writeln!(f, "clip_norm = {c}")?,
            None => writeln!(f, "clip_norm = none")?,
        }
        writeln!(f, "lambda = {}", self.lambda)?;
        writeln!(f, "mu = {},{},{}", self.mu[0], self.mu[1], self.mu[2])?;
        writeln!(f, "eps = {}", self.eps)?;
        if let Some(m) = &self.manifest {
            writeln!(f, "manifest = {}", m.display())?;
        }
        writeln!(f, "checkpoint = {}", self.checkpoint.display())?;
        write!(f, "loss_log = {}", self.loss_log.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut c = RunConfig::default();
        c.apply_text("# header\n\nsteps = 7 # trailing\n").unwrap();
        assert_eq!(c.steps, 7);
    }

    #[test]
    fn every_key_appears_in_display() {
        let c = RunConfig {
            manifest: Some(PathBuf::from("m.csv")),
            ..RunConfig::default()
        };
        let text = c.to_string();
        for k in KEYS {
            assert!(text.lines().any(|l| l.starts_with(&format!("{k} = "))), "{k}");
        }
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("mu", "0.1,0.2").is_err());
        assert!(c.set("preset", "huge").is_err());
        assert!(c.apply_override("steps").is_err());
        assert!(c.set("clip_norm", "none").is_ok());
    }

    proptest! {
        #[test]
        fn display_parses_back(seed in any::<u64>(), steps in 0usize..10_000, lr in 0.0f64..1.0, small in any::<bool>(), v in 0usize..6) {
            let c = RunConfig {
                seed,
                steps,
                lr,
                preset: if small { Preset::Small } else { Preset::Tiny },
                variant: Variant::ALL[v],
                clip_norm: if small { Some(lr + 1.0) } else { None },
                ..RunConfig::default()
            };
            let mut back = RunConfig::default();
            back.apply_text(&c.to_string()).unwrap();
            prop_assert_eq!(back, c);
        }

        #[test]
        fn unknown_keys_always_fail(key in "[a-z_]{1,12}") {
            prop_assume!(!KEYS.contains(&key.as_str()));
            prop_assert!(RunConfig::default().set(&key, "1").is_err());
        }
    }
}
