//! Run configuration: one flat JSON object with dotted keys that mirror
//! the command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gunc_core::data::{sigma_preset, BatchSource, SamplerConfig, DEFAULT_GAMMA_RANGE};
use gunc_core::net::{Fusion, NetworkSpec, ENCODER_DEPTH};
use gunc_core::optim::{AdamConfig, LossReduction, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::UsageError;

pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Dataset kernel width: a number or one of the named presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSetting {
    Value(f64),
    Preset(String),
}

impl SigmaSetting {
    pub fn parse(s: &str) -> Self {
        s.parse()
            .map(SigmaSetting::Value)
            .unwrap_or_else(|_| SigmaSetting::Preset(s.to_string()))
    }

    pub fn resolve(&self) -> Result<f64> {
        let value = match self {
            SigmaSetting::Value(v) => *v,
            SigmaSetting::Preset(name) => sigma_preset(name).ok_or_else(|| {
                UsageError(format!(
                    "data.sigma: unknown preset `{name}` (expected trancos, shanghai, ucsd or a number)"
                ))
            })?,
        };
        if !(value > 0.0 && value.is_finite()) {
            return Err(UsageError(format!("data.sigma: {value} must be positive")).into());
        }
        Ok(value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(rename = "data.dir")]
    pub data_dir: PathBuf,
    #[serde(rename = "data.sigma")]
    pub sigma: SigmaSetting,
    /// Images with a longer side are shrunk to it on load.
    #[serde(rename = "data.max_side")]
    pub max_side: Option<usize>,

    #[serde(rename = "net.in_channels")]
    pub in_channels: usize,
    #[serde(rename = "net.encoder_channels")]
    pub encoder_channels: [usize; ENCODER_DEPTH],
    #[serde(rename = "net.gated")]
    pub gated: bool,
    #[serde(rename = "net.fusion")]
    pub fusion: Fusion,
    #[serde(rename = "net.leaky_slope")]
    pub leaky_slope: f64,
    #[serde(rename = "net.patch_side")]
    pub patch_side: usize,
    #[serde(rename = "net.filter_size_threshold")]
    pub filter_size_threshold: usize,

    #[serde(rename = "train.precision")]
    pub precision: Precision,
    #[serde(rename = "train.iterations")]
    pub iterations: u64,
    #[serde(rename = "train.batch_size")]
    pub batch_size: usize,
    #[serde(rename = "train.loss")]
    pub loss: LossReduction,
    #[serde(rename = "train.l2_scale")]
    pub l2_scale: f64,
    #[serde(rename = "train.l2_biases")]
    pub l2_biases: bool,
    #[serde(rename = "train.init_std")]
    pub init_std: f64,
    #[serde(rename = "train.seed")]
    pub seed: u64,
    /// Defaults to `min(1000, iterations)`.
    #[serde(rename = "train.eval_every")]
    pub eval_every: Option<u64>,
    #[serde(rename = "train.checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(rename = "train.micro_batch")]
    pub micro_batch: usize,
    #[serde(rename = "train.lr")]
    pub lr: f64,
    #[serde(rename = "train.beta1")]
    pub beta1: f64,
    #[serde(rename = "train.beta2")]
    pub beta2: f64,
    #[serde(rename = "train.epsilon")]
    pub epsilon: f64,
    #[serde(rename = "train.centered_fraction")]
    pub centered_fraction: f64,
    #[serde(rename = "train.flip_probability")]
    pub flip_probability: f64,
    #[serde(rename = "train.gamma")]
    pub gamma: bool,
    #[serde(rename = "train.gamma_min")]
    pub gamma_min: f64,
    #[serde(rename = "train.gamma_max")]
    pub gamma_max: f64,
    #[serde(rename = "train.batch_source")]
    pub batch_source: BatchSource,

    #[serde(rename = "run.out")]
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = NetworkSpec::default();
        let train = TrainConfig::default();
        RunConfig {
            data_dir: PathBuf::from("data"),
            sigma: SigmaSetting::Value(4.0),
            max_side: None,
            in_channels: spec.in_channels,
            encoder_channels: spec.encoder_channels,
            gated: spec.gated,
            fusion: spec.fusion,
            leaky_slope: spec.leaky_slope,
            patch_side: spec.patch_side,
            filter_size_threshold: spec.filter_size_threshold,
            precision: Precision::F32,
            iterations: train.iterations,
            batch_size: train.sampler.batch_size,
            loss: train.loss,
            l2_scale: train.l2_scale,
            l2_biases: train.l2_biases,
            init_std: train.init_std,
            seed: train.seed,
            eval_every: None,
            checkpoint_every: train.checkpoint_every,
            micro_batch: train.micro_batch,
            lr: train.adam.lr,
            beta1: train.adam.beta1,
            beta2: train.adam.beta2,
            epsilon: train.adam.epsilon,
            centered_fraction: train.sampler.centered_fraction,
            flip_probability: train.sampler.flip_probability,
            gamma: false,
            gamma_min: DEFAULT_GAMMA_RANGE.0,
            gamma_max: DEFAULT_GAMMA_RANGE.1,
            batch_source: train.sampler.source,
            out: PathBuf::from("run"),
        }
    }
}

/// Reads a config file as a raw key → value map.
pub fn read_config_map(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(UsageError(format!("{}: config must be a JSON object", path.display())).into()),
        Err(e) => Err(UsageError(format!("{}: {e}", path.display())).into()),
    }
}

impl RunConfig {
    /// `self` with every key of `overlay` replaced; diagnostics name the
    /// offending key.
    pub fn overlay(&self, overlay: &Map<String, Value>, origin: &str) -> Result<Self> {
        let Value::Object(mut merged) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config serializes to an object")
        };
        for (k, v) in overlay {
            merged.insert(k.clone(), v.clone());
        }
        serde_path_to_error::deserialize(Value::Object(merged)).map_err(|e| {
            let key = e.path().to_string();
            UsageError(format!("{origin}: `{key}`: {}", e.inner())).into()
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::default().overlay(&read_config_map(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes") + "\n";
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            in_channels: self.in_channels,
            encoder_channels: self.encoder_channels,
            gated: self.gated,
            fusion: self.fusion,
            leaky_slope: self.leaky_slope,
            patch_side: self.patch_side,
            filter_size_threshold: self.filter_size_threshold,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            loss: self.loss,
            l2_scale: self.l2_scale,
            l2_biases: self.l2_biases,
            init_std: self.init_std,
            seed: self.seed,
            eval_every: self.eval_every.unwrap_or_else(|| self.iterations.min(1_000)),
            checkpoint_every: self.checkpoint_every,
            micro_batch: self.micro_batch,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            sampler: SamplerConfig {
                batch_size: self.batch_size,
                centered_fraction: self.centered_fraction,
                patch_side: self.patch_side,
                flip_probability: self.flip_probability,
                gamma_range: self.gamma.then_some((self.gamma_min, self.gamma_max)),
                source: self.batch_source,
            },
        }
    }

    /// Fills defaults that depend on other fields and checks everything.
    pub fn resolve(mut self) -> Result<Self> {
        self.sigma = SigmaSetting::Value(self.sigma.resolve()?);
        self.eval_every = Some(self.train_config().eval_every);
        if self.max_side.is_some_and(|m| m < 32) {
            return Err(UsageError("data.max_side: must be ≥ 32".into()).into());
        }
        self.network_spec()
            .validate()
            .map_err(|e| UsageError(format!("net: {e}")))?;
        self.train_config().validate().map_err(|e| {
            UsageError(format!(
                "train.{}",
                e.to_string().trim_start_matches("invalid argument: ")
            ))
        })?;
        Ok(self)
    }

    pub fn sigma_value(&self) -> Result<f64> {
        self.sigma.resolve()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default().resolve().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let map: Map<String, Value> = serde_json::from_str(&text).unwrap();
        assert!(map.contains_key("train.lr"));
        assert_eq!(RunConfig::default().overlay(&map, "t").unwrap(), cfg);
    }

    #[test]
    fn bad_keys_are_named() {
        let mut map = Map::new();
        map.insert("train.lr".into(), Value::String("fast".into()));
        let err = RunConfig::default().overlay(&map, "cfg").unwrap_err().to_string();
        assert!(err.contains("train.lr"), "{err}");

        let mut map = Map::new();
        map.insert("train.learning_rate".into(), Value::from(0.1));
        let err = RunConfig::default().overlay(&map, "cfg").unwrap_err().to_string();
        assert!(err.contains("train.learning_rate"), "{err}");
    }

    #[test]
    fn presets_resolve() {
        assert_eq!(SigmaSetting::parse("trancos").resolve().unwrap(), 10.0);
        assert_eq!(SigmaSetting::parse("2.5").resolve().unwrap(), 2.5);
        assert!(SigmaSetting::parse("mall").resolve().is_err());
        assert!(SigmaSetting::parse("-1").resolve().is_err());
    }

    #[test]
    fn eval_every_follows_short_runs() {
        let cfg = RunConfig {
            iterations: 20,
            ..RunConfig::default()
        };
        assert_eq!(cfg.resolve().unwrap().eval_every, Some(20));
        let cfg = RunConfig {
            iterations: 20,
            eval_every: Some(50),
            ..RunConfig::default()
        };
        assert!(cfg.resolve().unwrap_err().to_string().contains("eval_every"));
    }
}
