//! Training hyperparameters and named profiles.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::loss::ObjectiveWeights;
use crate::model::Architecture;

/// Desk-scale step size and reconstruction weight, balanced against the
/// summed ranking terms of a 256-pair batch.
pub const DESK_LEARNING_RATE: f64 = 3e-6;
pub const DESK_BETA: f64 = 1000.0;

/// Named hyperparameter bundles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Full-size model, learning rate 0.0001.
    Weak,
    /// Full-size model, learning rate 0.05.
    Strong,
    /// Scaled-down model for a laptop CPU.
    Desk,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(Profile::Weak),
            "strong" => Ok(Profile::Strong),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected weak|strong|desk)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Weak => "weak",
            Profile::Strong => "strong",
            Profile::Desk => "desk",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_weight: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub margin: f64,
    pub neg_k: usize,
    pub max_epochs: usize,
    /// Epochs without strict validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::profile(Profile::Weak)
    }
}

pub const KEYS: [&str; 13] = [
    "latent_dim",
    "hidden",
    "batch_size",
    "learning_rate",
    "l2_weight",
    "alpha",
    "beta",
    "gamma",
    "margin",
    "neg_k",
    "max_epochs",
    "patience",
    "seed",
];

impl TrainConfig {
    pub fn profile(p: Profile) -> Self {
        let full = TrainConfig {
            latent_dim: 512,
            hidden: vec![512],
            batch_size: 1024,
            learning_rate: 0.0001,
            l2_weight: 0.001,
            alpha: 3.0,
            beta: 1e5,
            gamma: 1.0,
            margin: 0.2,
            neg_k: 10,
            max_epochs: 200,
            patience: 10,
            seed: 0,
        };
        match p {
            Profile::Weak => full,
            Profile::Strong => TrainConfig {
                learning_rate: 0.05,
                ..full
            },
            Profile::Desk => TrainConfig {
                latent_dim: 32,
                hidden: vec![64],
                batch_size: 256,
                learning_rate: DESK_LEARNING_RATE,
                beta: DESK_BETA,
                max_epochs: 50,
                ..full
            },
        }
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            beta: self.beta,
            gamma: self.gamma,
            alpha: self.alpha,
            margin: self.margin,
            neg_k: self.neg_k,
        }
    }

    pub fn architecture(&self, music_dim: usize, visual_dim: usize, textual_dim: usize) -> Architecture {
        Architecture {
            latent_dim: self.latent_dim,
            hidden: self.hidden.clone(),
            music_dim,
            visual_dim,
            textual_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("l2_weight", self.l2_weight),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if self.latent_dim == 0 || self.hidden.contains(&0) {
            return bad("latent and hidden widths must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.neg_k == 0 || self.neg_k > self.batch_size - 1 {
            return bad(format!("neg_k must be in 1..={}, got {}", self.batch_size - 1, self.neg_k));
        }
        Ok(())
    }

    /// Sets one field from its `key=value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "latent_dim" => self.latent_dim = num(key, value)?,
            "hidden" => {
                self.hidden = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|w| num(key, w)).collect::<Result<_>>()?
                }
            }
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "l2_weight" => self.l2_weight = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "margin" => self.margin = num(key, value)?,
            "neg_k" => self.neg_k = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown training key {other:?}"))),
        }
        Ok(())
    }

    /// `key=value` lines in a fixed order; floats use shortest round-trip form.
    pub fn to_kv(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip([
            self.latent_dim.to_string(),
            hidden.join(","),
            self.batch_size.to_string(),
            self.learning_rate.to_string(),
            self.l2_weight.to_string(),
            self.alpha.to_string(),
            self.beta.to_string(),
            self.gamma.to_string(),
            self.margin.to_string(),
            self.neg_k.to_string(),
            self.max_epochs.to_string(),
            self.patience.to_string(),
            self.seed.to_string(),
        ]) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}
