//! Run configuration: one JSON file drives every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::DoeSpec;
use crate::integrator::AdaptiveOptions;
use crate::nn::Architecture;
use crate::physics::FluidParams;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("override `{0}` must look like dotted.path=value")]
    Override(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum TrainMode {
    #[default]
    Single,
    TwoStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub report: PathBuf,
    /// Ground truth for the study cases.
    #[serde(default)]
    pub study_dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    /// Seed for the train/validation split.
    pub seed: u64,
    #[serde(default)]
    pub fluid: FluidParams,
    pub doe: DoeSpec,
    #[serde(default)]
    pub solver: AdaptiveOptions,
    /// Training share of the split.
    #[serde(default = "default_split")]
    pub split_ratio: f64,
    pub network: Architecture,
    pub train: TrainConfig,
    #[serde(default)]
    pub mode: TrainMode,
    /// Radius normalizing the `r0` trunk coordinate; defaults to the first
    /// design radius.
    #[serde(default)]
    pub r0_ref: Option<f64>,
    #[serde(default)]
    pub study: Option<DoeSpec>,
    pub paths: Paths,
}

fn default_split() -> f64 {
    0.8
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, ConfigError> {
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Field {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |f: &str, m: String| {
            Err(ConfigError::Field {
                field: f.into(),
                message: m,
            })
        };
        if self.format_version != CONFIG_VERSION {
            return field(
                "format_version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.format_version),
            );
        }
        if let Err(e) = self.fluid.validate() {
            return field("fluid", e.to_string());
        }
        if let Err(e) = self.doe.validate() {
            return field("doe", e.to_string());
        }
        if let Some(s) = &self.study {
            if let Err(e) = s.validate() {
                return field("study", e.to_string());
            }
        }
        if let Err(e) = self.network.validate() {
            return field("network", e.to_string());
        }
        if self.network.branch[0] != self.doe.n_points {
            return field(
                "network.branch",
                format!(
                    "input width {} must equal doe.n_points {}",
                    self.network.branch[0], self.doe.n_points
                ),
            );
        }
        if let Err(e) = self.train.weights.validate() {
            return field("train.weights", e.to_string());
        }
        if !(self.train.lr > 0.0) {
            return field("train.lr", "must be positive".into());
        }
        if self.train.batch_size == 0 {
            return field("train.batch_size", "must be positive".into());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return field("split_ratio", "must lie in (0, 1)".into());
        }
        if let Some(r) = self.r0_ref {
            if !(r > 0.0 && r.is_finite()) {
                return field("r0_ref", "must be positive".into());
            }
        }
        Ok(())
    }

    pub fn r0_ref(&self) -> f64 {
        self.r0_ref.unwrap_or(self.doe.r0_values[0])
    }
}

/// Set `a.b.c=value` in a JSON tree. The value is parsed as JSON when it
/// can be, otherwise taken as a string.
pub fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.into()))?;
    if key.is_empty() {
        return Err(ConfigError::Override(spec.into()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| ConfigError::Field {
            field: parts[..i].join("."),
            message: "is not an object".into(),
        })?;
        if i + 1 == parts.len() {
            obj.insert((*p).to_string(), value);
            return Ok(());
        }
        node = obj
            .entry((*p).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::LevelRange;
    use crate::nn::Activation;
    use crate::physics::BubbleModel;
    use crate::train::LossWeights;
    use proptest::prelude::*;

    pub(crate) fn sample() -> RunConfig {
        RunConfig {
            format_version: CONFIG_VERSION,
            seed: 7,
            fluid: FluidParams::default(),
            doe: DoeSpec {
                r0_values: vec![50e-6],
                amp: LevelRange::new(1e5, 2e5, 2),
                freq: LevelRange::new(3e5, 6e5, 3),
                t_max: 20e-6,
                n_points: 100,
                model: BubbleModel::RayleighPlesset,
            },
            solver: AdaptiveOptions::default(),
            split_ratio: 0.8,
            network: Architecture {
                branch: vec![100, 16, 8],
                trunk: vec![1, 16, 8],
                branch_activation: Activation::Rowdy,
                trunk_activation: Activation::Relu,
                rowdy_terms: 5,
            },
            train: TrainConfig {
                lr: 5e-4,
                batch_size: 4,
                epochs: 3,
                weights: LossWeights::SINGLE_RADIUS,
                seed: 1,
                auto_balance: false,
                step1_ode: false,
                branch_epochs: None,
                kfold: None,
            },
            mode: TrainMode::Single,
            r0_ref: None,
            study: None,
            paths: Paths {
                dataset: "data".into(),
                model: "model".into(),
                report: "report".into(),
                study_dataset: None,
            },
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back = RunConfig::from_value(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn field_level_errors() {
        let mut v = sample().to_value();
        v["train"]["lr"] = serde_json::json!("fast");
        let e = RunConfig::from_value(v).unwrap_err().to_string();
        assert!(e.contains("train.lr"), "{e}");
        let mut v = sample().to_value();
        v["train"]["learning_rate"] = serde_json::json!(1.0);
        let e = RunConfig::from_value(v).unwrap_err().to_string();
        assert!(e.contains("learning_rate"), "{e}");
        let mut v = sample().to_value();
        v["network"]["branch"] = serde_json::json!([50, 16, 8]);
        let e = RunConfig::from_value(v).unwrap_err().to_string();
        assert!(e.contains("network.branch"), "{e}");
    }

    #[test]
    fn overrides() {
        let mut v = sample().to_value();
        apply_override(&mut v, "train.epochs=11").unwrap();
        apply_override(&mut v, "mode=two-step").unwrap();
        apply_override(&mut v, "paths.report=out/r").unwrap();
        let c = RunConfig::from_value(v).unwrap();
        assert_eq!(c.train.epochs, 11);
        assert_eq!(c.mode, TrainMode::TwoStep);
        assert_eq!(c.paths.report, PathBuf::from("out/r"));
        assert!(apply_override(&mut sample().to_value(), "nokey").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_prop(lr in 1e-6f64..1.0, epochs in 1usize..100_000, seed in any::<u64>(), w in 0.0f64..1e4) {
            let mut c = sample();
            c.train.lr = lr;
            c.train.epochs = epochs;
            c.seed = seed;
            c.train.weights.w_ode = w;
            let text = serde_json::to_string(&c).unwrap();
            let back = RunConfig::from_value(serde_json::from_str(&text).unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
