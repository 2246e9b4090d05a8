//! Training configuration: every knob of the total objective and schedule.

use serde::{Deserialize, Serialize};

use crate::detector::NUM_LEVELS;
use crate::error::{Error, Result};

/// Hyperparameters of one training run. The JSON config file mirrors these
/// field names exactly; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight factor balancing detection loss and adaptation loss.
    pub lambda: f64,
    /// Number of image-level domain classifiers (equal-interval placement).
    pub n_classifiers: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub flip_prob: f64,
    /// Fog strength used when this config drives dataset generation.
    pub fog_intensity: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            n_classifiers: 3,
            lr_phase1: 0.01,
            lr_phase2: 0.001,
            epochs_phase1: 6,
            epochs_phase2: 4,
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 0,
            flip_prob: 0.5,
            fog_intensity: 0.6,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.epochs_phase1 + self.epochs_phase2
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.epochs_phase1 {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }

    /// Check every invariant, reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.lambda < 0.0 {
            violations.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.n_classifiers < 1 || self.n_classifiers > NUM_LEVELS {
            violations.push(format!(
                "n_classifiers must be in [1, {NUM_LEVELS}], got {}",
                self.n_classifiers
            ));
        }
        if self.lr_phase1 <= 0.0 {
            violations.push(format!("lr_phase1 must be > 0, got {}", self.lr_phase1));
        }
        if self.lr_phase2 <= 0.0 {
            violations.push(format!("lr_phase2 must be > 0, got {}", self.lr_phase2));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            violations.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            violations.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            violations.push(format!("flip_prob must be in [0, 1], got {}", self.flip_prob));
        }
        if !(0.0..=1.0).contains(&self.fog_intensity) {
            violations.push(format!(
                "fog_intensity must be in [0, 1], got {}",
                self.fog_intensity
            ));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations))
        }
    }

    /// Parse a JSON object (empty object means all defaults), applying
    /// `key=value` overrides before deserializing, so unknown keys in either
    /// place fail before any work starts.
    pub fn from_json_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<TrainConfig> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        if !value.is_object() {
            return Err(Error::Config(vec!["config must be a JSON object".into()]));
        }
        for (key, raw) in overrides {
            let obj = value.as_object_mut().expect("checked above");
            let parsed: serde_json::Value = match serde_json::from_str(raw) {
                Ok(v) => v,
                Err(_) => serde_json::Value::String(raw.clone()),
            };
            // dotted keys address nested objects; the config is flat today,
            // so a single segment is the common case
            let mut segments = key.split('.').peekable();
            let mut current = obj;
            loop {
                let seg = segments.next().expect("split yields at least one");
                if segments.peek().is_none() {
                    current.insert(seg.to_string(), parsed);
                    break;
                }
                current = current
                    .entry(seg.to_string())
                    .or_insert_with(|| serde_json::Value::Object(Default::default()))
                    .as_object_mut()
                    .ok_or_else(|| {
                        Error::Config(vec![format!("override key {key:?} traverses a non-object")])
                    })?;
            }
        }
        let config: TrainConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(vec![e.to_string()]))?;
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_yields_defaults() {
        let c = TrainConfig::from_json_with_overrides("{}", &[]).unwrap();
        assert_eq!(c, TrainConfig::default());
        assert!((c.lambda - 0.1).abs() < 1e-15);
        assert_eq!(c.total_epochs(), 10);
    }

    #[test]
    fn all_violations_reported_at_once() {
        let mut c = TrainConfig::default();
        c.lambda = -1.0;
        c.n_classifiers = 5;
        c.momentum = 1.5;
        let err = c.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lambda"), "{msg}");
        assert!(msg.contains("n_classifiers"), "{msg}");
        assert!(msg.contains("momentum"), "{msg}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = TrainConfig::from_json_with_overrides("{\"lambda\": 0.1, \"typo\": 3}", &[]);
        assert!(err.is_err());
        let err = TrainConfig::from_json_with_overrides("{}", &[("typo".into(), "3".into())]);
        assert!(err.is_err());
    }

    #[test]
    fn overrides_apply_and_are_validated() {
        let c = TrainConfig::from_json_with_overrides("{}", &[("lambda".into(), "0".into())]).unwrap();
        assert_eq!(c.lambda, 0.0);
        let err = TrainConfig::from_json_with_overrides("{}", &[("lambda".into(), "-1".into())]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn phase_learning_rates() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_for_epoch(0), 0.01);
        assert_eq!(c.lr_for_epoch(5), 0.01);
        assert_eq!(c.lr_for_epoch(6), 0.001);
        assert_eq!(c.lr_for_epoch(9), 0.001);
    }
}
