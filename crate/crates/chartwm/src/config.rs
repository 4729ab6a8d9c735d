//! One configuration document for the whole pipeline.
//!
//! A single JSON file drives simulation, training, evaluation, and rollout,
//! so an experiment is reproducible from exactly one artifact. Every field
//! has a default; unknown keys anywhere in the document are rejected rather
//! than silently ignored; parse → serialize → parse is the identity.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::preprocess::PreprocConfig;
use crate::sim::{MotionConfig, SceneConfig};
use crate::trainer::TrainConfig;

/// Evaluation knobs for the chart metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Neighborhood size for trustworthiness/continuity; `null` picks
    /// 5% of each trajectory's snapshot count.
    pub k: Option<usize>,
    /// Histogram resolution for the Rajski distance.
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: None, bins: 50 }
    }
}

/// The full experiment document.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub motion: MotionConfig,
    pub preproc: PreprocConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Seed for dataset synthesis (`simulate` uses it unless overridden).
    pub data_seed: u64,
    /// Seed for model parameter initialization.
    pub model_seed: u64,
}

impl RunConfig {
    /// Cross-field consistency on top of each section's own validation:
    /// the scene geometry and delay truncation must match the model's input
    /// plane, or every downstream stage would fail obscurely.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.scene.validate().map_err(|e| ModelError::InvalidConfig {
            field: "scene".into(),
            reason: e.to_string(),
        })?;
        self.preproc.validate(self.scene.n_sub).map_err(|e| ModelError::InvalidConfig {
            field: "preproc".into(),
            reason: e.to_string(),
        })?;
        self.model.validate()?;
        self.train.validate()?;
        self.weights.validate()?;
        if self.eval.bins < 2 {
            return Err(ModelError::InvalidConfig {
                field: "eval.bins".into(),
                reason: format!("need at least 2 bins, got {}", self.eval.bins),
            });
        }
        let rows = self.scene.b * self.scene.m;
        if rows != self.model.in_rows {
            return Err(ModelError::InvalidConfig {
                field: "model.in_rows".into(),
                reason: format!(
                    "scene provides {} antenna rows (b·m = {}·{}), model expects {}",
                    rows, self.scene.b, self.scene.m, self.model.in_rows
                ),
            });
        }
        if self.preproc.l_taps != self.model.in_taps {
            return Err(ModelError::InvalidConfig {
                field: "model.in_taps".into(),
                reason: format!(
                    "preprocessing keeps {} delay taps, model expects {}",
                    self.preproc.l_taps, self.model.in_taps
                ),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }
}

/// Parse a configuration document. Unknown keys at any level are an error;
/// omitted fields take their defaults; validation is NOT run here (parsing
/// fuzz inputs must be safe on wild values).
pub fn parse_run_config(text: &str) -> Result<RunConfig, serde_json::Error> {
    serde_json::from_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_document_is_valid_and_round_trips_identically() {
        let cfg = RunConfig::default();
        cfg.validate().expect("defaults must be self-consistent");
        let json = cfg.to_json();
        let back = parse_run_config(&json).unwrap();
        assert_eq!(json, back.to_json(), "parse → serialize must be the identity");
    }

    #[test]
    fn empty_document_fills_every_default() {
        let cfg = parse_run_config("{}").unwrap();
        assert_eq!(cfg.to_json(), RunConfig::default().to_json());
        assert_eq!(cfg.eval.bins, 50);
        assert_eq!(cfg.train.epochs, 30);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(parse_run_config(r#"{"extra": 1}"#).is_err(), "top level");
        assert!(
            parse_run_config(r#"{"train": {"learning_rate": 0.1}}"#).is_err(),
            "nested misspelling must not be silently dropped"
        );
        assert!(parse_run_config(r#"{"scene": {"antennas": 4}}"#).is_err());
    }

    #[test]
    fn partial_documents_override_only_what_they_name() {
        let cfg = parse_run_config(r#"{"train": {"epochs": 3, "batch_k": 8}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_k, 8);
        assert_eq!(cfg.train.horizon, TrainConfig::default().horizon);
        assert_eq!(cfg.scene.n_sub, SceneConfig::default().n_sub);
    }

    #[test]
    fn geometry_cross_checks_catch_mismatched_sections() {
        let mut cfg = RunConfig::default();
        cfg.model.in_rows = 12;
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig { field, .. }) if field == "model.in_rows"));

        let mut cfg = RunConfig::default();
        cfg.preproc.l_taps = 8;
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig { field, .. }) if field == "model.in_taps"));

        let mut cfg = RunConfig::default();
        cfg.eval.bins = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wild_numeric_values_parse_without_panicking() {
        // Parsing stays total even for absurd values — only validate() judges.
        let cfg =
            parse_run_config(r#"{"train": {"lr_peak": 1e308, "epochs": 0}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 0);
        let bad = parse_run_config(r#"{"train": {"epochs": -1}}"#);
        assert!(bad.is_err(), "negative counts cannot inhabit usize");
    }
}
