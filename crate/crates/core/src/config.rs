//! Run configuration: one TOML file describing data, model and training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    gen_synthetic, load_csv, make_windows, split, Dataset, SplitRanges, SplitRatios, StandardScaler,
    SyntheticSpec, WindowSet,
};
use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelSpec};
use crate::training::TrainConfig;

/// Dataset source value that selects the generated benchmark series.
pub const SYNTHETIC_SOURCE: &str = "synthetic";

pub const GRID_EXPERTS: [usize; 9] = [2, 3, 4, 5, 6, 7, 8, 9, 10];
pub const GRID_BLOCKS: [usize; 3] = [1, 2, 3];
pub const GRID_DROPOUT: [f64; 3] = [0.2, 0.3, 0.4];
pub const GRID_BATCH: [usize; 4] = [8, 32, 64, 128];
pub const GRID_LR: [f64; 3] = [0.001, 0.0005, 0.0001];
pub const GRID_HORIZON: [usize; 5] = [12, 96, 192, 336, 720];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV path, or `synthetic`.
    pub source: String,
    /// Label used in reports; defaults to the file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Chronological split; defaults depend on the dataset name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitRatios>,
    /// Standardize every channel with train-split statistics before
    /// windowing.
    pub scale: bool,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: SYNTHETIC_SOURCE.into(),
            name: None,
            split: None,
            scale: true,
            synthetic: SyntheticSpec::default(),
        }
    }
}

/// Axis values for ablation sweeps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub experts: Vec<usize>,
    pub blocks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub allow_offgrid: bool,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// Parses TOML text; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let field = toml_field(text, &e).unwrap_or_else(|| "config".into());
            Error::Config { field, message }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration always serializes")
    }

    /// Canonical JSON used for checkpoint echoes and hashing.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("run configuration always serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    pub fn dataset_name(&self) -> String {
        if let Some(name) = &self.data.name {
            return name.clone();
        }
        if self.data.source == SYNTHETIC_SOURCE {
            return SYNTHETIC_SOURCE.into();
        }
        Path::new(&self.data.source)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.data.source.clone())
    }

    /// Structural checks, then the hyperparameter grid unless off-grid
    /// values are allowed.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.source.is_empty() {
            return Err(Error::config("data.source", "must be a CSV path or `synthetic`"));
        }
        if self.data.source == SYNTHETIC_SOURCE {
            self.data.synthetic.validate()?;
        }
        if self.allow_offgrid {
            return Ok(());
        }
        self.check_grid()
    }

    fn check_grid(&self) -> Result<()> {
        let m = &self.model;
        let off = |field: &str, allowed: String| {
            Error::config(field, format!("outside the hyperparameter grid {allowed}; pass --allow-offgrid to override"))
        };
        if !GRID_HORIZON.contains(&m.horizon) {
            return Err(off("model.horizon", format!("{GRID_HORIZON:?}")));
        }
        let uses_experts = m.kind != ModelKind::DLinear;
        if uses_experts && m.experts != 0 && !GRID_EXPERTS.contains(&m.experts) {
            return Err(off("model.experts", "{0, 2..=10}".to_string()));
        }
        if m.kind == ModelKind::FreqMoe {
            if !GRID_BLOCKS.contains(&m.blocks) {
                return Err(off("model.blocks", format!("{GRID_BLOCKS:?}")));
            }
            if !GRID_DROPOUT.contains(&m.dropout) {
                return Err(off("model.dropout", format!("{GRID_DROPOUT:?}")));
            }
        }
        if !GRID_BATCH.contains(&self.train.batch_size) {
            return Err(off("train.batch_size", format!("{GRID_BATCH:?}")));
        }
        if !GRID_LR.contains(&self.train.lr) {
            return Err(off("train.lr", format!("{GRID_LR:?}")));
        }
        Ok(())
    }

    /// Loads or generates the dataset, splits it and cuts windows.
    pub fn prepare(&self) -> Result<Prepared> {
        let raw = if self.data.source == SYNTHETIC_SOURCE {
            gen_synthetic(&self.data.synthetic)?
        } else {
            let mut ds = load_csv(PathBuf::from(&self.data.source))?;
            ds.name = self.dataset_name();
            ds
        };
        prepare_dataset(raw, self)
    }
}

fn prepare_dataset(raw: Dataset, cfg: &RunConfig) -> Result<Prepared> {
    let name = cfg.dataset_name();
    let ratios = cfg.data.split.unwrap_or_else(|| SplitRatios::default_for(&name));
    let (s, p) = (cfg.model.lookback, cfg.model.horizon);
    let ranges = split(raw.len(), ratios, s + p)?;
    let scaler = if cfg.data.scale {
        StandardScaler::fit(&raw, ranges.train.clone())?
    } else {
        StandardScaler::identity(raw.n_channels())
    };
    let dataset = scaler.transform(&raw);
    let train = make_windows(&dataset, ranges.train.clone(), s, p)?;
    let val = make_windows(&dataset, ranges.val.clone(), s, p)?;
    let test = make_windows(&dataset, ranges.test.clone(), s, p)?;
    Ok(Prepared {
        name,
        dataset,
        scaler,
        ranges,
        train,
        val,
        test,
    })
}

/// A dataset ready for training and evaluation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub name: String,
    /// Scaled series.
    pub dataset: Dataset,
    pub scaler: StandardScaler,
    pub ranges: SplitRanges,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

/// Best-effort dotted key of the line a TOML error points at.
fn toml_field(text: &str, err: &toml::de::Error) -> Option<String> {
    let span = err.span()?;
    let mut table = String::new();
    let mut key = None;
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        if span.start < pos + line.len() {
            if let Some((k, _)) = trimmed.split_once('=') {
                key = Some(k.trim().trim_matches('"').to_string());
            }
            break;
        }
        pos += line.len();
    }
    let key = key?;
    Some(if table.is_empty() { key } else { format!("{table}.{key}") })
}
