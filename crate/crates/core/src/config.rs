//! The JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::AugmentationConfig;
use crate::metrics::MetricConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// Every section is optional and unknown keys are rejected at any depth.
/// The backbone lives in its own top-level section; `model.backbone` is
/// refused so there is exactly one place to set it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub backbone: BackboneConfig,
    #[serde(skip_serializing)]
    model: ModelConfig,
    pub train: TrainConfig,
    pub augmentation: AugmentationConfig,
    pub metrics: MetricConfig,
}

impl RunConfigFile {
    pub fn new(model: ModelConfig, train: TrainConfig, augmentation: AugmentationConfig, metrics: MetricConfig) -> Self {
        RunConfigFile {
            backbone: model.backbone.clone(),
            model,
            train,
            augmentation,
            metrics,
        }
    }

    /// Parses and validates. Errors name the offending key path, such as
    /// `train.lr0` or `model.channelz`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed JSON: {e}")))?;
        if raw.pointer("/model/backbone").is_some() {
            return Err(Error::Config(
                "model.backbone: set the backbone in the top-level `backbone` section".into(),
            ));
        }
        let mut cfg: RunConfigFile = serde_path_to_error::deserialize(raw).map_err(|e| {
            let mut path = e.path().to_string();
            let inner = e.into_inner().to_string();
            // make sure unknown-field errors name the key itself
            if let Some(field) = inner
                .strip_prefix("unknown field `")
                .and_then(|rest| rest.split('`').next())
            {
                if path == "." {
                    path = field.to_string();
                } else if path != field && !path.ends_with(&format!(".{field}")) {
                    path = format!("{path}.{field}");
                }
            }
            Error::Config(format!("{path}: {inner}"))
        })?;
        cfg.model.backbone = cfg.backbone.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{name}: {m}")),
                other => other,
            })
        };
        section("backbone", self.backbone.validate())?;
        section("model", self.model_config().validate())?;
        section("train", self.train.validate())?;
        section("augmentation", self.augmentation.validate())?;
        section("metrics", self.metrics.validate())
    }

    /// The model configuration with the backbone section merged in.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            ..self.model.clone()
        }
    }

    pub fn set_model(&mut self, model: ModelConfig) {
        self.backbone = model.backbone.clone();
        self.model = model;
    }

    /// Pretty JSON with the model section written without its backbone.
    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let mut model = serde_json::to_value(&self.model).expect("config serializes");
        model.as_object_mut().unwrap().remove("backbone");
        v.as_object_mut().unwrap().insert("model".into(), model);
        serde_json::to_string_pretty(&v).expect("config serializes") + "\n"
    }
}
