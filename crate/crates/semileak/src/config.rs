//! Experiment configuration, serialized as JSON with stable field names.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslMethod {
    Supervised,
    Fixmatch,
    Uda,
    Flexmatch,
}

impl SslMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SslMethod::Supervised => "supervised",
            SslMethod::Fixmatch => "fixmatch",
            SslMethod::Uda => "uda",
            SslMethod::Flexmatch => "flexmatch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimFn {
    Js,
    Cosine,
    Correlation,
    Euclidean,
}

impl SimFn {
    pub fn as_str(&self) -> &'static str {
        match self {
            SimFn::Js => "js",
            SimFn::Cosine => "cosine",
            SimFn::Correlation => "correlation",
            SimFn::Euclidean => "euclidean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "js" => Ok(SimFn::Js),
            "cosine" => Ok(SimFn::Cosine),
            "correlation" => Ok(SimFn::Correlation),
            "euclidean" => Ok(SimFn::Euclidean),
            other => config_err(format!("unknown similarity function '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Tinycnn,
    Wrn28,
}

/// Full experiment description; one JSON file drives all pipeline stages.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub ssl_method: SslMethod,
    /// Labeled budget drawn from the target training part.
    #[serde(rename = "L")]
    pub labeled_count: usize,
    /// Confidence threshold for pseudo-labeling.
    pub tau: f64,
    /// Unlabeled-to-labeled batch size ratio.
    pub uratio: usize,
    pub total_steps: usize,
    /// Initial learning rate of the cosine schedule.
    pub lr0: f64,
    pub ema_momentum: f64,
    /// Channel width multiplier of the classifier family.
    pub widen_factor: usize,
    /// Augmented view count per side for the view-consistency attack.
    #[serde(rename = "K")]
    pub views: usize,
    pub sim_fn: SimFn,
    /// Number of strong-augmentation transforms stacked on the weak base.
    pub aug_level: usize,
    pub seed: u64,

    #[serde(default = "default_family")]
    pub family: ModelFamily,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_sgd_momentum")]
    pub sgd_momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Weight of the unlabeled loss term.
    #[serde(default = "default_lambda_u")]
    pub lambda_u: f64,
    /// Sharpening temperature for distribution-alignment style targets.
    #[serde(default = "default_uda_temperature")]
    pub uda_temperature: f64,
    /// Histogram bin count for the entropy-distribution distance.
    #[serde(default = "default_entropy_bins")]
    pub entropy_bins: usize,
}

fn default_family() -> ModelFamily {
    ModelFamily::Tinycnn
}
fn default_batch_size() -> usize {
    16
}
fn default_sgd_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_lambda_u() -> f64 {
    1.0
}
fn default_uda_temperature() -> f64 {
    0.4
}
fn default_entropy_bins() -> usize {
    50
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            ssl_method: SslMethod::Fixmatch,
            labeled_count: 40,
            tau: 0.95,
            uratio: 7,
            total_steps: 3000,
            lr0: 0.03,
            ema_momentum: 0.999,
            widen_factor: 1,
            views: 10,
            sim_fn: SimFn::Js,
            aug_level: 2,
            seed: 0,
            family: default_family(),
            batch_size: default_batch_size(),
            sgd_momentum: default_sgd_momentum(),
            weight_decay: default_weight_decay(),
            lambda_u: default_lambda_u(),
            uda_temperature: default_uda_temperature(),
            entropy_bins: default_entropy_bins(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reject values outside the supported domain. `tau` above one is allowed
    /// here only through the library API (it degenerates semi-supervised
    /// methods to the supervised baseline); the CLI requires `0 < tau <= 1`.
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return config_err(format!("tau must lie in (0,1], got {}", self.tau));
        }
        if self.labeled_count == 0 {
            return config_err("L must be positive");
        }
        if self.uratio == 0 {
            return config_err("uratio must be positive");
        }
        if self.views == 0 {
            return config_err("K must be positive");
        }
        if self.aug_level > 4 {
            return config_err(format!("aug_level must be in 0..=4, got {}", self.aug_level));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return config_err(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) && self.ema_momentum != 1.0 {
            return config_err(format!(
                "ema_momentum must lie in [0,1], got {}",
                self.ema_momentum
            ));
        }
        if self.widen_factor == 0 {
            return config_err("widen_factor must be positive");
        }
        if self.family == ModelFamily::Wrn28 && ![1, 2, 4, 8].contains(&self.widen_factor) {
            return config_err(format!(
                "wrn28 widen_factor must be one of 1, 2, 4, 8, got {}",
                self.widen_factor
            ));
        }
        if self.batch_size == 0 {
            return config_err("batch_size must be positive");
        }
        if self.uda_temperature <= 0.0 {
            return config_err(format!(
                "uda_temperature must be positive, got {}",
                self.uda_temperature
            ));
        }
        if self.entropy_bins == 0 {
            return config_err("entropy_bins must be positive");
        }
        Ok(())
    }
}
