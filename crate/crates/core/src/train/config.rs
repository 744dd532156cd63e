use std::fmt::Write as _;

use super::TrainError;
use crate::arch::{default_dropout, level_channels, ModelKind, Rank};
use crate::optim::DEFAULT_LEARNING_RATE;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub rank: Rank,
    pub width_scale: usize,
    /// Input extent per spatial axis.
    pub spatial: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub gamma: f64,
    /// Inverse-frequency class weights in the Dice term instead of uniform.
    pub class_weighting: bool,
    pub seed: u64,
    /// Share of training cases held out for validation, rounded down.
    pub validation_fraction: f64,
    /// Augmented copies appended to the training split, as a share of it.
    pub augmentation_ratio: f64,
}

/// Default batch size per rank.
pub fn default_batch_size(rank: Rank) -> usize {
    match rank {
        Rank::Three => 32,
        Rank::Two => 100,
    }
}

impl TrainConfig {
    /// Desk-scale defaults for a model and rank.
    pub fn new(model: ModelKind, rank: Rank) -> Self {
        Self {
            model,
            rank,
            width_scale: 8,
            spatial: 32,
            batch_size: default_batch_size(rank),
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: 100,
            dropout: default_dropout(rank),
            gamma: 2.0,
            class_weighting: true,
            seed: 0,
            validation_fraction: 0.1,
            augmentation_ratio: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        level_channels(self.width_scale)?;
        if self.spatial < 16 || !self.spatial.is_power_of_two() {
            return bad(format!("spatial extent {} must be a power of two >= 16", self.spatial));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction {} outside [0, 1)", self.validation_fraction));
        }
        if !(self.augmentation_ratio >= 0.0 && self.augmentation_ratio.is_finite()) {
            return bad(format!("augmentation_ratio {}", self.augmentation_ratio));
        }
        Ok(())
    }

    /// Spatial shape of one sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        vec![self.spatial; self.rank.dims()]
    }

    /// `key = value` lines, one per field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model", self.model.to_string()),
            ("rank", self.rank.to_string()),
            ("width_scale", self.width_scale.to_string()),
            ("spatial", self.spatial.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", format!("{:e}", self.learning_rate)),
            ("epochs", self.epochs.to_string()),
            ("dropout", self.dropout.to_string()),
            ("gamma", self.gamma.to_string()),
            ("class_weighting", self.class_weighting.to_string()),
            ("seed", self.seed.to_string()),
            ("validation_fraction", self.validation_fraction.to_string()),
            ("augmentation_ratio", self.augmentation_ratio.to_string()),
        ]
    }

    /// Sets one field from its textual form. Changing `rank` does not touch
    /// the rank-dependent defaults; callers apply those first.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, TrainError> {
            v.parse().map_err(|_| TrainError::Config(format!("{key}: cannot parse {v:?}")))
        }
        let v = value.trim();
        match key.trim() {
            "model" => self.model = v.parse().map_err(TrainError::Config)?,
            "rank" => self.rank = v.parse().map_err(TrainError::Config)?,
            "width_scale" => self.width_scale = num(key, v)?,
            "spatial" => self.spatial = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "dropout" => self.dropout = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "class_weighting" => self.class_weighting = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "validation_fraction" => self.validation_fraction = num(key, v)?,
            "augmentation_ratio" => self.augmentation_ratio = num(key, v)?,
            other => return Err(TrainError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Missing keys keep
    /// the defaults of the model and rank named in the text.
    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let pairs = parse_pairs(text)?;
        let get = |k: &str| pairs.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let model = get("model").unwrap_or("unet").parse().map_err(TrainError::Config)?;
        let rank = get("rank").unwrap_or("3d").parse().map_err(TrainError::Config)?;
        let mut cfg = Self::new(model, rank);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

/// `key = value` lines with `#` comments and blank lines skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, TrainError> {
    text.lines()
        .enumerate()
        .filter_map(|(n, line)| {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                return None;
            }
            Some(match line.split_once('=') {
                Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
                None => Err(TrainError::Config(format!("line {}: expected key = value", n + 1))),
            })
        })
        .collect()
}
