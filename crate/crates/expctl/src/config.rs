//! Experiment configuration: a JSON document resolved against a scale preset.

use std::fs;
use std::path::{Path, PathBuf};

use lilac_core::data::{Dataset, StreamConfig};
use lilac_core::model::{Arch, ModelConfig};
use lilac_core::specialization::resolve_strategy;
use lilac_core::trainer::{Baseline, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{CtlError, Result};

pub const DEFAULT_OUTPUT_DIR: &str = "lilac-out";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Paper,
    #[default]
    Desk,
}

/// A baseline name, or a list of module paths specialised under A&C.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaselineSpec {
    Name(String),
    Paths(Vec<String>),
}

/// The document as written. Overrides are merged key by key onto the preset
/// of the chosen scale; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub arch: String,
    #[serde(default)]
    pub baselines: Vec<BaselineSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub scale: Scale,
    #[serde(default)]
    pub stream: Map<String, Value>,
    #[serde(default)]
    pub model: Map<String, Value>,
    #[serde(default)]
    pub train: Map<String, Value>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// The effective settings of an experiment. Its canonical JSON is hashed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Resolved {
    pub dataset: Dataset,
    pub arch: Arch,
    pub scale: Scale,
    pub baselines: Vec<String>,
    pub seeds: Vec<u64>,
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub settings: Resolved,
    pub baselines: Vec<Baseline>,
    /// Lowercase hex sha256 of the canonical settings.
    pub hash: String,
    /// Directory holding one subdirectory per config hash.
    pub root: PathBuf,
}

fn merge<T: Serialize + DeserializeOwned>(base: T, overrides: &Map<String, Value>, section: &str) -> Result<T> {
    let mut value = serde_json::to_value(base).map_err(|e| CtlError::Runtime(e.to_string()))?;
    let obj = value.as_object_mut().expect("presets serialize to objects");
    for (k, v) in overrides {
        if !obj.contains_key(k) {
            return Err(CtlError::Config(format!("unknown {section} setting {k:?}")));
        }
        obj.insert(k.clone(), v.clone());
    }
    serde_json::from_value(value).map_err(|e| CtlError::Config(format!("{section}: {e}")))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CtlError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CtlError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Validates every field and fixes the output root. `base_dir` anchors a
    /// relative `output_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<Experiment> {
        let dataset: Dataset = self.dataset.parse()?;
        let arch: Arch = self.arch.parse()?;
        if self.seeds.is_empty() {
            return Err(CtlError::Config("seeds must not be empty".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(CtlError::Config("seeds must be distinct".into()));
        }
        let (stream, model, train) = match self.scale {
            Scale::Paper => (
                StreamConfig::paper(dataset),
                ModelConfig::paper(arch, dataset),
                TrainConfig::paper(arch, dataset),
            ),
            Scale::Desk => (
                StreamConfig::desk(dataset),
                ModelConfig::desk(arch, dataset),
                TrainConfig::desk(arch, dataset),
            ),
        };
        let stream: StreamConfig = merge(stream, &self.stream, "stream")?;
        let model: ModelConfig = merge(model, &self.model, "model")?;
        let train: TrainConfig = merge(train, &self.train, "train")?;
        if stream.dataset != dataset || model.dataset != dataset || model.arch != arch {
            return Err(CtlError::Config("dataset and arch are set at the top level only".into()));
        }
        stream.validate()?;
        model.validate()?;
        train.validate()?;
        let mut baselines = Vec::with_capacity(self.baselines.len());
        for spec in &self.baselines {
            let b: Baseline = match spec {
                BaselineSpec::Name(n) => n.parse()?,
                BaselineSpec::Paths(p) if p.is_empty() => {
                    return Err(CtlError::Config("empty module path list".into()))
                }
                BaselineSpec::Paths(p) => Baseline::ac(&p.join(","), lilac_core::trainer::Hook::None),
            };
            if let Baseline::Continual { strategy, .. } = &b {
                resolve_strategy(arch, model.layers, strategy)?;
            }
            if baselines.contains(&b) {
                return Err(CtlError::Config(format!("baseline {b} listed twice")));
            }
            baselines.push(b);
        }
        let settings = Resolved {
            dataset,
            arch,
            scale: self.scale,
            baselines: baselines.iter().map(|b| b.to_string()).collect(),
            seeds: self.seeds.clone(),
            stream,
            model,
            train,
        };
        let canonical = serde_json::to_vec(&serde_json::to_value(&settings).map_err(|e| CtlError::Runtime(e.to_string()))?)
            .map_err(|e| CtlError::Runtime(e.to_string()))?;
        let root = match &self.output_dir {
            Some(d) if d.is_relative() => base_dir.join(d),
            Some(d) => d.clone(),
            None => base_dir.join(DEFAULT_OUTPUT_DIR),
        };
        Ok(Experiment {
            settings,
            baselines,
            hash: sha256_hex(&canonical),
            root,
        })
    }
}

impl Experiment {
    /// Loads a config file; `seed` replaces the seed list and `out` the
    /// output root.
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(s) = seed {
            cfg.seeds = vec![s];
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut exp = cfg.resolve(base)?;
        if let Some(o) = out {
            exp.root = o.to_path_buf();
        }
        Ok(exp)
    }

    pub fn short_hash(&self) -> &str {
        &self.hash[..16]
    }

    /// Output directory of one command for this config.
    pub fn dir(&self, command: &str) -> PathBuf {
        self.root.join(self.short_hash()).join(command)
    }
}
