use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, Dataset, SyntheticSpec};
use crate::defenses::DefenseSpec;
use crate::edge_seed::SeedConfig;
use crate::error::{Error, Result};
use crate::interpreters::Method;
use crate::mga::MgaConfig;

pub const DEFAULT_CONFIDENCE: f64 = 0.6;

/// Where the images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetRef {
    Synthetic {
        classes: usize,
        per_class: usize,
        size: usize,
        seed: u64,
    },
    Cifar10 {
        path: PathBuf,
    },
}

impl DatasetRef {
    pub fn synthetic(per_class: usize, seed: u64) -> Self {
        DatasetRef::Synthetic {
            classes: 4,
            per_class,
            size: 16,
            seed,
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetRef::Synthetic {
                classes,
                per_class,
                size,
                seed,
            } => dataset::generate_synthetic(&SyntheticSpec::new(*classes, *per_class, *size, *seed)),
            DatasetRef::Cifar10 { path } => dataset::load_cifar10(path),
        }
    }
}

/// Which model's interpreter produces the adversarial map for IoU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouModel {
    #[default]
    Source,
    /// Analysis mode; needs white-box access to the target.
    Target,
}

/// One cell of the attack matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetRef,
    /// Weight files written by `train`.
    pub source_model: PathBuf,
    pub target_model: PathBuf,
    pub interpreter: Method,
    #[serde(default)]
    pub defense: Option<DefenseSpec>,
    /// Defaults to the interpreter's standard seeding settings.
    #[serde(default)]
    pub seed_cfg: Option<SeedConfig>,
    #[serde(default)]
    pub mga_cfg: MgaConfig,
    pub sample_count: usize,
    #[serde(default = "default_confidence")]
    pub selection_confidence: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub iou_model: IouModel,
    /// Adds wall-clock fields to every record (which breaks byte equality
    /// between runs).
    #[serde(default)]
    pub record_timing: bool,
}

fn default_confidence() -> f64 {
    DEFAULT_CONFIDENCE
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetRef, source: impl Into<PathBuf>, target: impl Into<PathBuf>, interpreter: Method) -> Self {
        Self {
            dataset,
            source_model: source.into(),
            target_model: target.into(),
            interpreter,
            defense: None,
            seed_cfg: None,
            mga_cfg: MgaConfig::default(),
            sample_count: 10,
            selection_confidence: DEFAULT_CONFIDENCE,
            seed: 0,
            iou_model: IouModel::Source,
            record_timing: false,
        }
    }

    pub fn seed_config(&self) -> SeedConfig {
        self.seed_cfg
            .clone()
            .unwrap_or_else(|| SeedConfig::for_method(self.interpreter))
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_model == self.target_model {
            return Err(Error::Config(format!(
                "source and target are the same model ({})",
                self.source_model.display()
            )));
        }
        if !(0.0..=1.0).contains(&self.selection_confidence) {
            return Err(Error::Config(format!(
                "selection confidence {} outside [0, 1]",
                self.selection_confidence
            )));
        }
        if let Some(d) = &self.defense {
            d.validate()?;
        }
        self.seed_config().validate()?;
        self.mga_cfg.validate()
    }

    /// Hex SHA-256 prefix of the canonical JSON form; stamped on every record.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
