use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::stats::McNemarMethod;
use crate::data::{
    build_vocab, generate_planted, ingest_eraser_jsonl, split, Dataset, EraserOptions, PlantedSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{PerturbMode, PredictionPath};
use crate::model::{ModelConfig, Probe};
use crate::training::TrainConfig;

/// What the `train` command produces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Extractor and predictor trained jointly under `train.loss`.
    #[default]
    Joint,
    /// Predictor alone on full inputs.
    FullInput,
    /// Predictor alone on a mixture of full and human-rationalized inputs.
    Adapted,
}

impl Phase {
    pub fn prediction_path(self) -> PredictionPath {
        match self {
            Phase::Joint => PredictionPath::Joint,
            Phase::FullInput | Phase::Adapted => PredictionPath::FullInput,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub documents: PathBuf,
    pub annotations: PathBuf,
    pub labels: Vec<String>,
    pub max_seq_len: usize,
    pub min_freq: usize,
    /// Train / validation / test fractions.
    pub split: (f64, f64, f64),
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            documents: PathBuf::from("docs.jsonl"),
            annotations: PathBuf::from("annotations.jsonl"),
            labels: Vec::new(),
            max_seq_len: 128,
            min_freq: 1,
            split: (0.8, 0.1, 0.1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub lambda_su: Vec<f64>,
    pub lambda_su1: Vec<f64>,
    pub sentence: Vec<bool>,
    pub importance: Vec<bool>,
    pub selective: Vec<bool>,
    /// Sparsity weights for unsupervised runs; empty disables them.
    pub lambda_sp: Vec<f64>,
    /// Add a predictor-only run on full inputs.
    pub full_input_baseline: bool,
    /// Train an adapted predictor and compute perturbation curves with it.
    pub adapted_curves: bool,
    pub workers: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            lambda_su: vec![0.5, 1.0, 2.0],
            lambda_su1: vec![0.0, 2.0, 4.0],
            sentence: vec![false, true],
            importance: vec![false, true],
            selective: vec![false, true],
            lambda_sp: vec![0.15, 0.25, 0.35],
            full_input_baseline: true,
            adapted_curves: true,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub probe: Probe,
    pub curve_probes: Vec<Probe>,
    pub curve_modes: Vec<PerturbMode>,
    pub curve_grid: Vec<u32>,
    /// Mix ratio of the adapted predictor.
    pub adapt_mix_ratio: f64,
    /// Split used for reported metrics.
    pub split: String,
    pub mcnemar: McNemarMethod,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            probe: Probe::Substitution,
            curve_probes: vec![Probe::Removal, Probe::Substitution],
            curve_modes: PerturbMode::ALL.to_vec(),
            curve_grid: (0..=10).map(|i| i * 10).collect(),
            adapt_mix_ratio: 0.5,
            split: "test".into(),
            mcnemar: McNemarMethod::ContinuityCorrected,
        }
    }
}

/// Everything one command needs. `seed` is the master seed: it replaces the seeds of the
/// data generator, the model initialiser and the training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Directory holding `meta.json` and the split files.
    pub dataset: Option<PathBuf>,
    pub phase: Phase,
    pub planted: PlantedSpec,
    pub ingest: IngestConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub sweep: SweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: None,
            phase: Phase::Joint,
            planted: PlantedSpec::default(),
            ingest: IngestConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            sweep: SweepSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    /// Reads a TOML config; relative paths inside it are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = cfg.dataset.as_mut() {
            rebase(d);
        }
        rebase(&mut cfg.ingest.documents);
        rebase(&mut cfg.ingest.annotations);
        Ok(cfg)
    }

    /// Copy with the master seed pushed into every component.
    pub fn resolved(mut self) -> Self {
        self.set_seed(self.seed);
        self
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.planted.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Short SHA-256 digest of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(digest(&serde_json::to_string(self)?))
    }

    /// The dataset at `dataset`, or a freshly generated planted dataset when none is set.
    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            Some(dir) => Dataset::load(dir),
            None => generate_planted(&self.planted),
        }
    }

    pub fn dataset_dir(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("config has no dataset path".into()))
    }
}

/// Pretty JSON of `value` with a leading `config_hash` field.
pub fn stamped_json<T: Serialize>(value: &T, config_hash: &str) -> Result<String> {
    let mut map = serde_json::Map::new();
    map.insert("config_hash".into(), config_hash.into());
    match serde_json::to_value(value)? {
        serde_json::Value::Object(fields) => map.extend(fields),
        other => {
            map.insert("value".into(), other);
        }
    }
    Ok(serde_json::to_string_pretty(&map)? + "\n")
}

pub fn digest(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Reads ERASER-style files, splits them and builds a vocabulary from the training split.
pub fn ingest_dataset(cfg: &IngestConfig, seed: u64) -> Result<Dataset> {
    if cfg.labels.len() < 2 {
        return Err(Error::Config(
            "ingest.labels needs at least two labels".into(),
        ));
    }
    let opts = EraserOptions {
        labels: cfg.labels.clone(),
        max_seq_len: cfg.max_seq_len,
    };
    let records = ingest_eraser_jsonl(&cfg.documents, &cfg.annotations, &opts)?;
    let (train, val, test) = split(&records, cfg.split, seed)?;
    let texts: Vec<String> = train.iter().map(|r| r.tokens.join(" ")).collect();
    let vocab = build_vocab(texts.iter().map(String::as_str), cfg.min_freq);
    let encode = |rs: &[crate::data::InstanceRecord]| -> Result<Vec<_>> {
        rs.iter().map(|r| r.encode(&vocab)).collect()
    };
    Ok(Dataset {
        train: encode(&train)?,
        val: encode(&val)?,
        test: encode(&test)?,
        labels: cfg.labels.clone(),
        vocab,
    })
}
