//! Training configuration and its flat `key = value` file format.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::GraphOptions;
use crate::objectives::Hyper;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    /// Raw embeddings feed every path (zero propagation layers).
    NoGraph,
    /// Prediction loss only.
    NoCl,
    NoFeatureCl,
    NoInterestCl,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoGraph,
        Ablation::NoCl,
        Ablation::NoFeatureCl,
        Ablation::NoInterestCl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoGraph => "no-graph",
            Ablation::NoCl => "no-cl",
            Ablation::NoFeatureCl => "no-feature-cl",
            Ablation::NoInterestCl => "no-interest-cl",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub dim: usize,
    pub layers: usize,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub negatives: usize,
    pub topk_neighbors: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub min_count: usize,
    pub keep_diagonal: bool,
    pub attend_positioned: bool,
    pub allow_repeats: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch: 128,
            dim: 64,
            layers: 2,
            tau: 0.5,
            alpha: 0.5,
            beta: 1.0,
            gamma: 0.05,
            negatives: 1280,
            topk_neighbors: 50,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            ablation: Ablation::Full,
            min_count: 5,
            keep_diagonal: false,
            attend_positioned: false,
            allow_repeats: false,
        }
    }
}

/// Config keys in file order. CLI flags use the same names.
pub const KEYS: [&str; 18] = [
    "lr",
    "batch",
    "dim",
    "layers",
    "tau",
    "alpha",
    "beta",
    "gamma",
    "negatives",
    "topk-neighbors",
    "max-epochs",
    "patience",
    "seed",
    "ablation",
    "min-count",
    "keep-diagonal",
    "attend-positioned",
    "allow-repeats",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Value of `key` rendered as it would appear in a config file.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match normalize(key).as_str() {
            "lr" => self.lr.to_string(),
            "batch" => self.batch.to_string(),
            "dim" => self.dim.to_string(),
            "layers" => self.layers.to_string(),
            "tau" => self.tau.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "gamma" => self.gamma.to_string(),
            "negatives" => self.negatives.to_string(),
            "topk-neighbors" => self.topk_neighbors.to_string(),
            "max-epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "seed" => self.seed.to_string(),
            "ablation" => self.ablation.to_string(),
            "min-count" => self.min_count.to_string(),
            "keep-diagonal" => self.keep_diagonal.to_string(),
            "attend-positioned" => self.attend_positioned.to_string(),
            "allow-repeats" => self.allow_repeats.to_string(),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = normalize(key);
        let k = key.as_str();
        match k {
            "lr" => self.lr = parse(k, value)?,
            "batch" => self.batch = parse(k, value)?,
            "dim" => self.dim = parse(k, value)?,
            "layers" => self.layers = parse(k, value)?,
            "tau" => self.tau = parse(k, value)?,
            "alpha" => self.alpha = parse(k, value)?,
            "beta" => self.beta = parse(k, value)?,
            "gamma" => self.gamma = parse(k, value)?,
            "negatives" => self.negatives = parse(k, value)?,
            "topk-neighbors" => self.topk_neighbors = parse(k, value)?,
            "max-epochs" => self.max_epochs = parse(k, value)?,
            "patience" => self.patience = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "ablation" => self.ablation = value.parse()?,
            "min-count" => self.min_count = parse(k, value)?,
            "keep-diagonal" => self.keep_diagonal = parse(k, value)?,
            "attend-positioned" => self.attend_positioned = parse(k, value)?,
            "allow-repeats" => self.allow_repeats = parse(k, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Builds a config from file text plus overrides. Every key must be
    /// supplied by one of the two; a missing key is reported together with
    /// its default value.
    pub fn from_file_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut values = parse_kv(text)?;
        for (k, v) in overrides {
            values.insert(normalize(k), v.clone());
        }
        let defaults = TrainConfig::default();
        for key in KEYS {
            if !values.contains_key(key) {
                return Err(Error::Config(format!(
                    "missing config key `{key}` (default: {})",
                    defaults.get(key)?
                )));
            }
        }
        let mut cfg = defaults;
        for (k, v) in &values {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults with overrides applied (no config file).
    pub fn from_overrides(overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_file_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.batch < 1 || self.dim < 1 {
            return bad("batch and dim must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return bad("beta and gamma must be non-negative");
        }
        if self.topk_neighbors < 1 {
            return bad("topk-neighbors must be at least 1");
        }
        if self.min_count < 1 {
            return bad("min-count must be at least 1");
        }
        Ok(())
    }

    /// Loss hyperparameters after the ablation is applied.
    pub fn hyper(&self) -> Hyper {
        let mut h = Hyper {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            tau: self.tau,
            negatives: self.negatives,
            layers: self.layers,
            attend_positioned: self.attend_positioned,
        };
        match self.ablation {
            Ablation::Full => {}
            Ablation::NoGraph => h.layers = 0,
            Ablation::NoCl => {
                h.beta = 0.0;
                h.gamma = 0.0;
            }
            Ablation::NoFeatureCl => h.gamma = 0.0,
            Ablation::NoInterestCl => h.beta = 0.0,
        }
        h
    }

    pub fn graph_options(&self) -> GraphOptions {
        GraphOptions {
            topk_neighbors: self.topk_neighbors,
            keep_diagonal: self.keep_diagonal,
        }
    }
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let key = normalize(k);
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
        }
    }
    Ok(out)
}
