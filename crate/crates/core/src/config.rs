//! The flat run configuration: every architecture field and every training
//! field side by side in one JSON object.

use serde_json::{Map, Value};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
}

fn object(value: Value) -> Map<String, Value> {
    match value {
        Value::Object(m) => m,
        _ => unreachable!("config structs serialize to objects"),
    }
}

impl RunConfig {
    /// Parses a flat JSON object. Missing fields take defaults; unknown or
    /// ill-typed fields are reported by name. The shared `seed` sets both
    /// the initialization and the shuffle seed.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        let Value::Object(fields) = value else {
            return Err(Error::config("config", "expected a JSON object"));
        };
        let mut backbone = object(serde_json::to_value(BackboneConfig::default()).expect("serializable"));
        let mut train = object(serde_json::to_value(TrainConfig::default()).expect("serializable"));
        for (key, v) in fields {
            let mut placed = false;
            for (target, parse) in [
                (&mut backbone, check_backbone as fn(&Map<String, Value>) -> Result<(), String>),
                (&mut train, check_train),
            ] {
                if target.contains_key(&key) {
                    target.insert(key.clone(), v.clone());
                    parse(target).map_err(|reason| Error::config(&key, reason))?;
                    placed = true;
                }
            }
            if !placed {
                return Err(Error::config(key, "unknown field"));
            }
        }
        let cfg = RunConfig {
            backbone: serde_json::from_value(Value::Object(backbone)).expect("checked"),
            train: serde_json::from_value(Value::Object(train)).expect("checked"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()
    }

    /// Sets both seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.backbone.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn to_json(&self) -> String {
        let mut all = object(serde_json::to_value(&self.backbone).expect("serializable"));
        all.extend(object(serde_json::to_value(self.train).expect("serializable")));
        serde_json::to_string_pretty(&Value::Object(all)).expect("serializable")
    }
}

fn check_backbone(m: &Map<String, Value>) -> Result<(), String> {
    serde_json::from_value::<BackboneConfig>(Value::Object(m.clone()))
        .map(|_| ())
        .map_err(|e| e.to_string())
}

fn check_train(m: &Map<String, Value>) -> Result<(), String> {
    serde_json::from_value::<TrainConfig>(Value::Object(m.clone()))
        .map(|_| ())
        .map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default().with_seed(9);
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_object_uses_defaults() {
        let cfg = RunConfig::from_json(r#"{"learning_rate": 0.0, "max_epochs": 1}"#).unwrap();
        assert_eq!(cfg.train.learning_rate, 0.0);
        assert_eq!(cfg.backbone, BackboneConfig::default());
    }

    #[test]
    fn names_bad_fields() {
        let err = RunConfig::from_json(r#"{"learning_rate": "fast"}"#).unwrap_err();
        assert!(err.to_string().contains("`learning_rate`"), "{err}");
        let err = RunConfig::from_json(r#"{"colour": 1}"#).unwrap_err();
        assert!(err.to_string().contains("`colour`"), "{err}");
        let err = RunConfig::from_json(r#"{"batch_size": 0}"#).unwrap_err();
        assert!(err.to_string().contains("`batch_size`"), "{err}");
    }

    #[test]
    fn seed_sets_both() {
        let cfg = RunConfig::from_json(r#"{"seed": 4}"#).unwrap();
        assert_eq!(cfg.backbone.seed, 4);
        assert_eq!(cfg.train.seed, 4);
    }
}
