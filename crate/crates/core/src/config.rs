//! File-first pipeline configuration (TOML).
//!
//! All randomness funnels through the top-level `seed`; it overrides any
//! `train.seed` in the file. Relative paths resolve against the directory
//! holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::descriptor::SliceParams;
use crate::eval::SplitMode;
use crate::geometry::RegionSpec;
use crate::inference::InferenceConfig;
use crate::ingest::backends::BackendsConfig;
use crate::net::ModelConfig;
use crate::pipeline::{Augmentation, ExperimentConfig, ExtractionConfig};
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_manifest: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            train_manifest: None,
            test_manifest: None,
            cache_dir: "cache".into(),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub split: SplitMode,
    pub paths: Paths,
    /// When set, the region spec is read from this TOML file instead.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region_file: Option<PathBuf>,
    pub region: RegionSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub slicing: SliceParams,
    pub augmentation: Augmentation,
    pub extraction: ExtractionConfig,
    pub backends: BackendsConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// The hashed part of a config: everything except where files live.
#[derive(Serialize)]
struct Hashed<'a> {
    seed: u64,
    split: SplitMode,
    region: &'a RegionSpec,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    inference: &'a InferenceConfig,
    slicing: &'a SliceParams,
    augmentation: &'a Augmentation,
    extraction: &'a ExtractionConfig,
    backends: &'a BackendsConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        if let Some(f) = &cfg.region_file {
            let path = cfg.resolve(f);
            let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
            cfg.region = RegionSpec::from_toml(&text)?;
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text, path.parent().map(Path::to_path_buf).unwrap_or_default())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is TOML-representable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_atomic(path, self.to_toml().as_bytes())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Set the seed everywhere it is consumed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.region.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        self.slicing.validate()?;
        if self.train.seed != self.seed {
            return Err(Error::InvalidConfig("train.seed must equal the top-level seed".into()));
        }
        for p in [&self.paths.train_manifest, &self.paths.test_manifest].into_iter().flatten() {
            let full = self.resolve(p);
            if !full.exists() {
                return Err(Error::MissingArtifact(full));
            }
        }
        Ok(())
    }

    /// Hash of every setting that affects results; paths are excluded so the
    /// same experiment hashes the same wherever it runs.
    pub fn hash(&self) -> String {
        artifact::hash_json(&Hashed {
            seed: self.seed,
            split: self.split,
            region: &self.region,
            model: &self.model,
            train: &self.train,
            inference: &self.inference,
            slicing: &self.slicing,
            augmentation: &self.augmentation,
            extraction: &self.extraction,
            backends: &self.backends,
        })
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            train: TrainConfig {
                seed: self.seed,
                ..self.train.clone()
            },
            inference: self.inference.clone(),
            slicing: self.slicing,
            split: self.split,
            augmentation: self.augmentation.clone(),
            seed: self.seed,
            region_spec_hash: self.region.hash(),
            config_hash: self.hash(),
        }
    }
}
