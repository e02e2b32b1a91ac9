//! Experiment configuration: a flat JSON object, every key optional.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_classes: usize,
    /// Teacher EMA decay.
    pub alpha: f64,
    pub icrm_momentum: f64,
    pub beta_params: [f64; 2],
    pub lambda_u: f64,
    pub lambda_d: f64,
    pub lambda_l: f64,
    pub tau: f64,
    pub source_aug_ratio: f64,
    pub target_aug_ratio: f64,
    pub burn_in_steps: u64,
    pub total_steps: u64,
    pub bank_capacity: usize,
    pub seed: u64,
    // simulation knobs
    pub learning_rate: f64,
    pub batch_size: usize,
    pub convergence_batches: usize,
    pub eval_every: u64,
    pub use_icl: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            alpha: crate::teacher::DEFAULT_ALPHA,
            icrm_momentum: crate::relation::DEFAULT_MOMENTUM,
            beta_params: [0.5, 0.5],
            lambda_u: crate::loss::DEFAULT_LAMBDA_U,
            lambda_d: crate::loss::DEFAULT_LAMBDA_D,
            lambda_l: crate::loss::DEFAULT_LAMBDA_L,
            tau: crate::teacher::DEFAULT_TAU,
            source_aug_ratio: crate::augment::DEFAULT_AUG_RATIO,
            target_aug_ratio: crate::augment::DEFAULT_AUG_RATIO,
            burn_in_steps: crate::teacher::DEFAULT_BURN_IN_STEPS,
            total_steps: crate::teacher::DEFAULT_TOTAL_STEPS,
            bank_capacity: crate::bank::DEFAULT_CAPACITY,
            seed: 0,
            learning_rate: 0.1,
            batch_size: 64,
            convergence_batches: 500,
            eval_every: 1000,
            use_icl: true,
        }
    }
}

fn range_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| range_err("<file>", e.to_string()))?;
        let Value::Object(map) = &value else {
            return Err(range_err("<file>", "expected a JSON object"));
        };
        let known = serde_json::to_value(ExperimentConfig::default()).expect("config serialises");
        let known = known.as_object().expect("config is an object");
        if let Some(key) = map.keys().find(|k| !known.contains_key(*k)) {
            return Err(range_err(key, "unknown key"));
        }
        for (key, v) in map {
            let probe = serde_json::json!({ key.as_str(): v });
            if let Err(e) = serde_json::from_value::<ExperimentConfig>(probe) {
                return Err(range_err(key, e.to_string()));
            }
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| range_err("<file>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("alpha", self.alpha),
            ("icrm_momentum", self.icrm_momentum),
            ("tau", self.tau),
            ("source_aug_ratio", self.source_aug_ratio),
            ("target_aug_ratio", self.target_aug_ratio),
        ];
        for (key, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(range_err(key, format!("{v} is outside [0, 1]")));
            }
        }
        for (key, v) in [
            ("lambda_u", self.lambda_u),
            ("lambda_d", self.lambda_d),
            ("lambda_l", self.lambda_l),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(range_err(key, format!("{v} must be >= 0")));
            }
        }
        if self.beta_params.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(range_err("beta_params", "both parameters must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(range_err("learning_rate", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(range_err("num_classes", "need at least 2"));
        }
        for (key, v) in [
            ("total_steps", self.total_steps),
            ("eval_every", self.eval_every),
            ("bank_capacity", self.bank_capacity as u64),
            ("batch_size", self.batch_size as u64),
            ("convergence_batches", self.convergence_batches as u64),
        ] {
            if v == 0 {
                return Err(range_err(key, "must be positive"));
            }
        }
        if self.burn_in_steps > self.total_steps {
            return Err(range_err("burn_in_steps", "exceeds total_steps"));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_json_str(&text)
}
