//! Pipeline configuration.
//!
//! The file format is one `section.key=value` assignment per line; `#` starts
//! a comment and blank lines are ignored:
//!
//! ```text
//! seed=7
//! train.epochs=100
//! constraints.k=6
//! ```
//!
//! Component seeds are derived from the top-level `seed`.

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterConfig;
use crate::constraints::ConstraintConfig;
use crate::document::LineParams;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::TrainConfig;
use crate::util::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub lines: LineParams,
    pub features: FeatureConfig,
    pub constraints: ConstraintConfig,
    pub train: TrainConfig,
    pub cluster: ClusterConfig,
    /// Epochs per interactive refinement round.
    pub refine_epochs: usize,
    /// Times each user constraint appears per refinement epoch.
    pub refine_user_repeat: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            lines: LineParams::default(),
            features: FeatureConfig::default(),
            constraints: ConstraintConfig::default(),
            train: TrainConfig::default(),
            cluster: ClusterConfig::default(),
            refine_epochs: 10,
            refine_user_repeat: 10,
        }
    }
}

/// Every recognised key, in file order.
pub const KEYS: &[&str] = &[
    "seed",
    "lines.threshold",
    "lines.overlap_min",
    "features.style_dim",
    "features.content_dim",
    "features.noise_std",
    "features.use_external_features",
    "features.font_families",
    "constraints.k",
    "constraints.height_ratio_max",
    "constraints.must_link_cap",
    "constraints.must_fraction",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.dropout",
    "train.grad_clip_norm",
    "train.init_std",
    "train.latent_dim",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "cluster.likelihood_min",
    "cluster.height_ratio_max",
    "refine.epochs",
    "refine.user_repeat",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::parse(key, format!("cannot parse `{}`", value.trim())))
}

impl PipelineConfig {
    pub fn with_seed(seed: u64) -> Self {
        PipelineConfig {
            seed,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "seed" => self.seed = num(key, value)?,
            "lines.threshold" => self.lines.threshold = num(key, value)?,
            "lines.overlap_min" => self.lines.overlap_min = num(key, value)?,
            "features.style_dim" => self.features.style_dim = num(key, value)?,
            "features.content_dim" => self.features.content_dim = num(key, value)?,
            "features.noise_std" => self.features.noise_std = num(key, value)?,
            "features.use_external_features" => self.features.use_external_features = num(key, value)?,
            "features.font_families" => self.features.font_families = num(key, value)?,
            "constraints.k" => self.constraints.k = num(key, value)?,
            "constraints.height_ratio_max" => self.constraints.height_ratio_max = num(key, value)?,
            "constraints.must_link_cap" => self.constraints.must_link_cap = num(key, value)?,
            "constraints.must_fraction" => self.constraints.must_fraction = num(key, value)?,
            "train.epochs" => self.train.epochs = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.learning_rate" => self.train.learning_rate = num(key, value)?,
            "train.dropout" => self.train.dropout = num(key, value)?,
            "train.grad_clip_norm" => self.train.grad_clip_norm = num(key, value)?,
            "train.init_std" => self.train.init_std = num(key, value)?,
            "train.latent_dim" => self.train.latent_dim = num(key, value)?,
            "train.beta1" => self.train.beta1 = num(key, value)?,
            "train.beta2" => self.train.beta2 = num(key, value)?,
            "train.adam_eps" => self.train.adam_eps = num(key, value)?,
            "cluster.likelihood_min" => self.cluster.likelihood_min = num(key, value)?,
            "cluster.height_ratio_max" => self.cluster.height_ratio_max = num(key, value)?,
            "refine.epochs" => self.refine_epochs = num(key, value)?,
            "refine.user_repeat" => self.refine_user_repeat = num(key, value)?,
            _ => return Err(Error::parse(key, "unknown configuration key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "lines.threshold" => self.lines.threshold.to_string(),
            "lines.overlap_min" => self.lines.overlap_min.to_string(),
            "features.style_dim" => self.features.style_dim.to_string(),
            "features.content_dim" => self.features.content_dim.to_string(),
            "features.noise_std" => self.features.noise_std.to_string(),
            "features.use_external_features" => self.features.use_external_features.to_string(),
            "features.font_families" => self.features.font_families.to_string(),
            "constraints.k" => self.constraints.k.to_string(),
            "constraints.height_ratio_max" => self.constraints.height_ratio_max.to_string(),
            "constraints.must_link_cap" => self.constraints.must_link_cap.to_string(),
            "constraints.must_fraction" => self.constraints.must_fraction.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.learning_rate" => self.train.learning_rate.to_string(),
            "train.dropout" => self.train.dropout.to_string(),
            "train.grad_clip_norm" => self.train.grad_clip_norm.to_string(),
            "train.init_std" => self.train.init_std.to_string(),
            "train.latent_dim" => self.train.latent_dim.to_string(),
            "train.beta1" => self.train.beta1.to_string(),
            "train.beta2" => self.train.beta2.to_string(),
            "train.adam_eps" => self.train.adam_eps.to_string(),
            "cluster.likelihood_min" => self.cluster.likelihood_min.to_string(),
            "cluster.height_ratio_max" => self.cluster.height_ratio_max.to_string(),
            "refine.epochs" => self.refine_epochs.to_string(),
            "refine.user_repeat" => self.refine_user_repeat.to_string(),
            _ => return None,
        })
    }

    /// Applies the assignments of a config file on top of `self`.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("line {}", n + 1), "expected key=value"))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a JSON object of flat keys, e.g. `{"train.epochs": 50}`.
    pub fn apply_json(&mut self, overrides: &serde_json::Map<String, serde_json::Value>) -> Result<()> {
        for (key, value) in overrides {
            let text = match value {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Bool(b) => b.to_string(),
                _ => return Err(Error::parse(key.as_str(), "expected a number, string or boolean")),
            };
            self.set(key, &text)?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lines.threshold > 0.0) {
            return Err(Error::validation("lines.threshold", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lines.overlap_min) {
            return Err(Error::validation("lines.overlap_min", "must lie in [0, 1]"));
        }
        self.features.validate()?;
        self.constraints.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.cluster.likelihood_min) {
            return Err(Error::validation("cluster.likelihood_min", "must lie in [0, 1]"));
        }
        if self.refine_user_repeat == 0 {
            return Err(Error::validation("refine.user_repeat", "must be at least 1"));
        }
        if !(self.cluster.height_ratio_max > 1.0) {
            return Err(Error::validation("cluster.height_ratio_max", "must exceed 1"));
        }
        Ok(())
    }

    /// Copy with every component seed derived from the top-level seed.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.features.seed = derive_seed(self.seed, "features");
        cfg.constraints.rng_seed = derive_seed(self.seed, "constraints");
        cfg.train.rng_seed = derive_seed(self.seed, "train");
        cfg
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = PipelineConfig::default();
        assert_eq!(c.lines.threshold, 0.1);
        assert_eq!(c.constraints.k, 6);
        assert_eq!(c.constraints.height_ratio_max, 1.25);
        assert_eq!(c.constraints.must_link_cap, 1000);
        assert_eq!(c.constraints.must_fraction, 0.6);
        assert_eq!(c.train.epochs, 100);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.dropout, 0.2);
        assert_eq!(c.train.grad_clip_norm, 5.0);
        assert_eq!(c.train.init_std, 0.01);
        assert_eq!(c.train.latent_dim, 20);
        assert_eq!(c.cluster.likelihood_min, 0.75);
        assert_eq!(c.cluster.height_ratio_max, 1.25);
        assert_eq!(c.refine_epochs, 10);
    }

    #[test]
    fn parses_flat_file() {
        let cfg = PipelineConfig::from_kv("# demo\nseed=7\n train.epochs = 12 # short\n\nfeatures.use_external_features=false\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 12);
        assert!(!cfg.features.use_external_features);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(PipelineConfig::from_kv("train.epoch=3"), Err(Error::Parse { .. })));
        assert!(matches!(PipelineConfig::from_kv("train.epochs=many"), Err(Error::Parse { .. })));
        assert!(matches!(PipelineConfig::from_kv("train.dropout=1.5"), Err(Error::Validation { .. })));
        assert!(PipelineConfig::from_kv("no equals sign").is_err());
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = PipelineConfig::with_seed(42);
        cfg.train.learning_rate = 3e-4;
        cfg.constraints.must_fraction = 0.55;
        assert_eq!(PipelineConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert_eq!(cfg.to_kv().lines().count(), KEYS.len());
    }

    #[test]
    fn json_overrides() {
        let mut cfg = PipelineConfig::default();
        let v: serde_json::Value = serde_json::json!({"train.epochs": 5, "seed": 3, "cluster.likelihood_min": "0.8"});
        cfg.apply_json(v.as_object().unwrap()).unwrap();
        assert_eq!((cfg.train.epochs, cfg.seed, cfg.cluster.likelihood_min), (5, 3, 0.8));
        let bad = serde_json::json!({"train.epochs": [1]});
        assert!(cfg.apply_json(bad.as_object().unwrap()).is_err());
    }

    #[test]
    fn seeds_are_derived() {
        let a = PipelineConfig::with_seed(1).resolved();
        let b = PipelineConfig::with_seed(2).resolved();
        assert_ne!(a.train.rng_seed, b.train.rng_seed);
        assert_ne!(a.train.rng_seed, a.constraints.rng_seed);
    }
}
