use std::fmt;
use std::str::FromStr;

use super::{Result, TrainError};
use crate::model::{ArchScale, FusionMode, FusionVariant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(TrainError::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// SGD momentum; ignored by Adam.
    pub momentum: f64,
    pub seed: u64,
    pub smooth_l1_beta: f64,
    pub variant: FusionVariant,
    pub arch: ArchScale,
    /// Global gradient-norm clip applied before each step; `None` disables it.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 36,
            batch_size: 16,
            optimizer: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            smooth_l1_beta: 1.0,
            variant: FusionVariant::new(FusionMode::Early, false),
            arch: ArchScale::desk(),
            max_grad_norm: Some(5.0),
        }
    }
}

pub const CONFIG_KEYS: [&str; 12] = [
    "epochs",
    "batch_size",
    "optimizer",
    "lr",
    "momentum",
    "seed",
    "smooth_l1_beta",
    "variant",
    "skip_connections",
    "max_grad_norm",
    "base_width",
    "blocks",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| TrainError::Config(format!("{key}: cannot parse `{v}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a nonnegative number, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return bad(format!("smooth_l1_beta must be positive, got {}", self.smooth_l1_beta));
        }
        if let Some(m) = self.max_grad_norm {
            if !(m > 0.0) {
                return bad(format!("max_grad_norm must be positive, got {m}"));
            }
        }
        self.arch
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "lr" => self.lr = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "smooth_l1_beta" => self.smooth_l1_beta = num(key, v)?,
            "variant" => {
                self.variant.mode = v.parse().map_err(|e: crate::model::ModelError| TrainError::Config(e.to_string()))?
            }
            "skip_connections" => self.variant.skip_connections = num(key, v)?,
            "max_grad_norm" => {
                self.max_grad_norm = if v == "none" { None } else { Some(num(key, v)?) }
            }
            "base_width" => self.arch.base_width = num(key, v)?,
            "blocks" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| num(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.arch.blocks = parts.try_into().map_err(|_| {
                    TrainError::Config(format!("blocks needs four comma-separated counts, got `{v}`"))
                })?;
            }
            other => {
                return Err(TrainError::Config(format!(
                    "unknown key `{other}`; expected one of {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses flat `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let b = self.arch.blocks;
        format!(
            "epochs = {}\nbatch_size = {}\noptimizer = {}\nlr = {}\nmomentum = {}\nseed = {}\n\
             smooth_l1_beta = {}\nvariant = {}\nskip_connections = {}\nmax_grad_norm = {}\n\
             base_width = {}\nblocks = {},{},{},{}\n",
            self.epochs,
            self.batch_size,
            self.optimizer,
            self.lr,
            self.momentum,
            self.seed,
            self.smooth_l1_beta,
            self.variant.mode,
            self.variant.skip_connections,
            self.max_grad_norm.map_or("none".to_string(), |m| m.to_string()),
            self.arch.base_width,
            b[0],
            b[1],
            b[2],
            b[3],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size), (36, 16));
        assert_eq!(c.optimizer, OptimizerKind::Sgd);
        assert_eq!((c.lr, c.momentum, c.smooth_l1_beta), (0.01, 0.9, 1.0));
    }

    #[test]
    fn text_roundtrip() {
        let mut c = TrainConfig::default();
        c.set("variant", "late").unwrap();
        c.set("max_grad_norm", "none").unwrap();
        c.set("blocks", "1, 2, 1, 1").unwrap();
        c.set("lr", "0.003").unwrap();
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parse_errors() {
        assert!(TrainConfig::parse("epochs 3").is_err());
        assert!(TrainConfig::parse("colour = red").is_err());
        assert!(TrainConfig::parse("variant = fusion").is_err());
        assert!(TrainConfig::parse("momentum = 1.0").is_err());
        assert!(TrainConfig::parse("blocks = 1,2").is_err());
        let c = TrainConfig::parse("# comment\nepochs = 4 # trailing\n\n").unwrap();
        assert_eq!(c.epochs, 4);
    }
}
