//! On-disk artifacts shared between commands: the threshold record and the
//! loaded data/model context.

use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};
use sigattack_core::data::{build_pairs, load_dir, Dataset, Pair, PairSet};
use sigattack_core::eval::DistanceRecord;
use sigattack_core::model::ModelWeights;
use std::path::{Path, PathBuf};

pub const MODEL_FILE: &str = "model.bin";
pub const THRESHOLD_FILE: &str = "threshold.json";

/// Everything needed to rebuild the split and judge decisions for a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub tau: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub accuracy: f64,
    pub test_tpr: f64,
    pub test_tnr: f64,
    pub test_accuracy: f64,
    pub split_seed: u64,
    pub train_writers: usize,
    pub pairs_per_class: Option<usize>,
    pub dataset_seed: u64,
    pub model_checksum: String,
}

impl ThresholdRecord {
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(THRESHOLD_FILE), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(THRESHOLD_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Dataset, frozen model, threshold and the rebuilt pair split.
pub struct Context {
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub dataset: Dataset,
    pub model: ModelWeights,
    pub record: ThresholdRecord,
    pub train: PairSet,
    pub test: PairSet,
}

impl Context {
    pub fn load(data_dir: &Path, model_dir: &Path) -> Result<Self> {
        let (dataset, issues) = load_dir(data_dir)?;
        for issue in &issues {
            log::warn!("skipped {}: {}", issue.path.display(), issue.message);
        }
        let model_path = model_dir.join(MODEL_FILE);
        let model = ModelWeights::load(&model_path).with_context(|| format!("loading {}", model_path.display()))?;
        let record = ThresholdRecord::load(model_dir)?;
        if model.checksum() != record.model_checksum {
            bail!(
                "{} does not match the checksum in {}",
                model_path.display(),
                model_dir.join(THRESHOLD_FILE).display()
            );
        }
        if !model.is_frozen() {
            bail!("{} holds unfrozen weights", model_path.display());
        }
        let (train, test) = build_pairs(&dataset, record.train_writers, record.pairs_per_class, record.split_seed)?;
        Ok(Self {
            data_dir: data_dir.to_path_buf(),
            model_dir: model_dir.to_path_buf(),
            dataset,
            model,
            record,
            train,
            test,
        })
    }

    pub fn split(&self, name: SplitName) -> &PairSet {
        match name {
            SplitName::Train => &self.train,
            SplitName::Test => &self.test,
        }
    }

    pub fn distances(&self, model: &ModelWeights, pairs: &[Pair]) -> Result<Vec<DistanceRecord>> {
        Ok(model.pair_distances(&self.dataset.images, pairs)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
        }
    }
}
