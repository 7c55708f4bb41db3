//! Run configuration: a flat JSON object with dotted keys.
//!
//! Every key has a default, so a config file only lists what it changes.
//! Overrides (`key=value`) must name an existing key; values are parsed as
//! JSON and fall back to a bare string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::embedder::{EmbedderConfig, Pooling};
use crate::episodes::{make_class_split, ClassSplit, EpisodeCounts, EpisodeSpec, ValMode};
use crate::error::{Error, Result};
use crate::graph::{generate_triangles_dataset, init_node_features, load_tu_dataset, FeaturePolicy, GraphDataset};
use crate::model::Variant;
use crate::proto::Metric;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetSource {
    #[serde(rename = "tu")]
    Tu,
    #[serde(rename = "synthetic-triangles")]
    SyntheticTriangles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "dataset.source")]
    pub dataset_source: DatasetSource,
    #[serde(rename = "dataset.name")]
    pub dataset_name: String,
    #[serde(rename = "dataset.root")]
    pub dataset_root: PathBuf,
    #[serde(rename = "dataset.features")]
    pub dataset_features: FeaturePolicy,
    #[serde(rename = "dataset.synthetic.n_classes")]
    pub synthetic_n_classes: usize,
    #[serde(rename = "dataset.synthetic.samples_per_class")]
    pub synthetic_samples_per_class: usize,
    #[serde(rename = "dataset.synthetic.seed")]
    pub synthetic_seed: u64,

    #[serde(rename = "split.base")]
    pub split_base: Vec<i64>,
    #[serde(rename = "split.val")]
    pub split_val: Vec<i64>,
    #[serde(rename = "split.novel")]
    pub split_novel: Vec<i64>,
    #[serde(rename = "split.val_mode")]
    pub split_val_mode: ValMode,
    /// Drop listed class ids that the loaded dataset does not contain.
    #[serde(rename = "split.skip_absent")]
    pub split_skip_absent: bool,

    #[serde(rename = "episode.n_way")]
    pub n_way: usize,
    #[serde(rename = "episode.k_shot")]
    pub k_shot: usize,
    #[serde(rename = "episode.n_query")]
    pub n_query: usize,
    #[serde(rename = "episode.train_per_epoch")]
    pub train_per_epoch: usize,
    #[serde(rename = "episode.val_per_epoch")]
    pub val_per_epoch: usize,
    #[serde(rename = "episode.test_per_epoch")]
    pub test_per_epoch: usize,

    #[serde(rename = "train.lr")]
    pub lr: f64,
    #[serde(rename = "train.batch_episodes")]
    pub batch_episodes: usize,
    #[serde(rename = "train.lambda_mixup")]
    pub lambda_mixup: f64,
    #[serde(rename = "train.lambda_reg")]
    pub lambda_reg: f64,
    #[serde(rename = "train.variant")]
    pub variant: Variant,
    #[serde(rename = "train.epochs_max")]
    pub epochs_max: usize,
    #[serde(rename = "train.patience")]
    pub patience: usize,

    #[serde(rename = "model.alpha_init")]
    pub alpha_init: f64,
    #[serde(rename = "model.gamma0_init")]
    pub gamma0_init: f64,
    #[serde(rename = "model.beta0_init")]
    pub beta0_init: f64,
    #[serde(rename = "model.metric")]
    pub metric: Metric,

    #[serde(rename = "embedder.n_layers")]
    pub n_layers: usize,
    #[serde(rename = "embedder.hidden_dim")]
    pub hidden_dim: usize,
    #[serde(rename = "embedder.mlp_layers")]
    pub mlp_layers: usize,
    #[serde(rename = "embedder.dropout")]
    pub dropout: f64,
    #[serde(rename = "embedder.pooling")]
    pub pooling: Pooling,

    #[serde(rename = "eval.n_episodes")]
    pub eval_episodes: usize,

    pub seed: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_source: DatasetSource::SyntheticTriangles,
            dataset_name: "TRIANGLES-synthetic".into(),
            dataset_root: PathBuf::from("data"),
            dataset_features: FeaturePolicy::Auto,
            synthetic_n_classes: 10,
            synthetic_samples_per_class: 201,
            synthetic_seed: 0,
            split_base: vec![1, 2, 3, 4, 5, 6, 7],
            split_val: Vec::new(),
            split_novel: vec![8, 9, 10],
            split_val_mode: ValMode::BaseSubsample20Pct,
            split_skip_absent: false,
            n_way: 3,
            k_shot: 5,
            n_query: 15,
            train_per_epoch: 2000,
            val_per_epoch: 500,
            test_per_epoch: 1,
            lr: 1e-4,
            batch_episodes: 32,
            lambda_mixup: 0.1,
            lambda_reg: 0.1,
            variant: Variant::PnTaeMu,
            epochs_max: 200,
            patience: 30,
            alpha_init: 7.5,
            gamma0_init: 0.0,
            beta0_init: 1.0,
            metric: Metric::SquaredL2,
            n_layers: 2,
            hidden_dim: 64,
            mlp_layers: 2,
            dropout: 0.0,
            pooling: Pooling::Mean,
            eval_episodes: 5000,
            seed: 0,
            workers: 0,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn config_err(e: serde_path_to_error::Error<serde_json::Error>) -> Error {
    Error::Config(format!("`{}`: {}", e.path(), e.inner()))
}

/// Parses an override value: JSON when it parses, otherwise a string.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(RunConfig::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    /// Builds a config from a JSON object plus `key=value` overrides.
    pub fn from_value(base: Value, overrides: &[String]) -> Result<Self> {
        let mut map: Map<String, Value> = match base {
            Value::Object(m) => m,
            other => return Err(Error::Config(format!("config must be a JSON object, got {other}"))),
        };
        let keys = Self::keys();
        for ov in overrides {
            let (k, v) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            let k = k.trim();
            if !keys.iter().any(|x| x == k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            map.insert(k.to_string(), override_value(v.trim()));
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(Value::Object(map)).map_err(config_err)?;
        cfg.train_config()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut de = serde_json::Deserializer::from_str(&text);
        let value: Value = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.inner())))?;
        Self::from_value(value, overrides)
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })
    }

    pub fn spec(&self) -> Result<EpisodeSpec> {
        EpisodeSpec::new(self.n_way, self.k_shot, self.n_query, self.seed)
    }

    pub fn embedder(&self) -> EmbedderConfig {
        EmbedderConfig {
            n_layers: self.n_layers,
            hidden_dim: self.hidden_dim,
            mlp_layers: self.mlp_layers,
            dropout: self.dropout,
            pooling: self.pooling,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let tc = TrainConfig {
            lr: self.lr,
            batch_episodes: self.batch_episodes,
            lambda_mixup: self.lambda_mixup,
            lambda_reg: self.lambda_reg,
            variant: self.variant,
            epochs_max: self.epochs_max,
            patience: self.patience,
            seed: self.seed,
            spec: self.spec()?,
            counts: EpisodeCounts {
                train: self.train_per_epoch,
                val: self.val_per_epoch,
                test: self.test_per_epoch,
            },
            embedder: self.embedder(),
            metric: self.metric,
            alpha_init: self.alpha_init,
            gamma0_init: self.gamma0_init,
            beta0_init: self.beta0_init,
            workers: self.workers,
        };
        tc.validate()?;
        Ok(tc)
    }

    pub fn load_dataset(&self) -> Result<GraphDataset> {
        match self.dataset_source {
            DatasetSource::Tu => {
                let ds = load_tu_dataset(&self.dataset_root, &self.dataset_name)?;
                if self.dataset_features == FeaturePolicy::Auto {
                    Ok(ds)
                } else {
                    init_node_features(ds, self.dataset_features)
                }
            }
            DatasetSource::SyntheticTriangles => {
                let ds = generate_triangles_dataset(
                    self.synthetic_n_classes,
                    self.synthetic_samples_per_class,
                    self.synthetic_seed,
                )?;
                init_node_features(ds, self.dataset_features)
            }
        }
    }

    /// Class split over `dataset`. With `split.skip_absent`, ids the dataset
    /// lacks are dropped and returned.
    pub fn split(&self, dataset: &GraphDataset) -> Result<(ClassSplit, Vec<i64>)> {
        let mut skipped = Vec::new();
        let mut keep = |ids: &[i64]| -> Vec<i64> {
            if !self.split_skip_absent {
                return ids.to_vec();
            }
            ids.iter()
                .copied()
                .filter(|&c| {
                    let present = dataset.class_of_original(c).is_some();
                    if !present {
                        skipped.push(c);
                    }
                    present
                })
                .collect()
        };
        let (base, val, novel) = (keep(&self.split_base), keep(&self.split_val), keep(&self.split_novel));
        let split = make_class_split(dataset, &base, &val, &novel, self.split_val_mode, &self.spec()?)?;
        Ok((split, skipped))
    }

    /// Canonical JSON text (fixed key order).
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        Ok(Manifest {
            command: command.into(),
            config_hash: config.hash()?,
            seed: config.seed,
            config: config.clone(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
