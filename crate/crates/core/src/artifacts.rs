//! On-disk model directories and run manifests.
//!
//! A model directory holds `model.ckpt`, `vocab.json`, `config.txt`,
//! `snapshot.ckpt`, `train_log.jsonl` and `manifest.json`.

use crate::config::TrainConfig;
use crate::corpus::{Utterance, Vocabulary};
use crate::distill::PredictionSnapshot;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::JointModel;
use crate::params::ParamStore;
use crate::train::{evaluate_with_loss, predict_utterances};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const CHECKPOINT: &str = "model.ckpt";
pub const VOCAB: &str = "vocab.json";
pub const CONFIG: &str = "config.txt";
pub const SNAPSHOT: &str = "snapshot.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const MANIFEST: &str = "manifest.json";

/// What a training run was started with. Written once, before training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: String,
    pub seed: u64,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub version: String,
    pub out: PathBuf,
}

impl RunManifest {
    pub fn new(cfg: &TrainConfig, train: &Path, dev: &Path, out: &Path) -> Self {
        Self {
            config: cfg.to_text(),
            seed: cfg.seed,
            train: train.to_path_buf(),
            dev: dev.to_path_buf(),
            version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            out: out.to_path_buf(),
        }
    }

    /// Fails if a manifest already exists in `dir`.
    pub fn write_new(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let file = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::Contract(format!("cannot create {}: {e}", path.display())))?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}

/// A trained model ready for inference.
pub struct ModelArtifacts {
    pub cfg: TrainConfig,
    pub vocab: Vocabulary,
    pub model: JointModel,
    pub store: ParamStore,
}

impl ModelArtifacts {
    /// Writes the checkpoint, vocabulary, config and (if given) snapshot
    /// into `dir`, creating it if needed.
    pub fn save(
        dir: &Path,
        cfg: &TrainConfig,
        vocab: &Vocabulary,
        store: &ParamStore,
        snapshot: Option<&PredictionSnapshot>,
    ) -> Result<()> {
        fs::create_dir_all(dir)?;
        store.save(&dir.join(CHECKPOINT))?;
        fs::write(dir.join(VOCAB), serde_json::to_string(vocab)?)?;
        fs::write(dir.join(CONFIG), cfg.to_text())?;
        if let Some(s) = snapshot {
            s.save(&dir.join(SNAPSHOT))?;
        }
        Ok(())
    }

    /// Accepts the model directory or the checkpoint inside it.
    pub fn load(path: &Path) -> Result<Self> {
        let dir = if path.is_dir() {
            path
        } else {
            path.parent().unwrap_or(Path::new("."))
        };
        let ckpt = if path.is_dir() {
            dir.join(CHECKPOINT)
        } else {
            path.to_path_buf()
        };
        let cfg = TrainConfig::load(&dir.join(CONFIG))?;
        let vocab: Vocabulary = serde_json::from_str(&fs::read_to_string(dir.join(VOCAB))?)?;
        let mut store = ParamStore::new();
        // initial values are overwritten by the checkpoint
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = JointModel::new(&mut store, cfg.model_config()?, &vocab, &mut rng)?;
        store.load(&ckpt)?;
        Ok(Self {
            cfg,
            vocab,
            model,
            store,
        })
    }

    pub fn predict(&self, data: &[Utterance]) -> Result<Vec<Utterance>> {
        predict_utterances(&self.model, &self.store, &self.vocab, data)
    }

    pub fn evaluate(&self, data: &[Utterance]) -> Result<EvalReport> {
        let (report, _) = evaluate_with_loss(
            &self.model,
            &self.store,
            &self.vocab,
            data,
            self.cfg.label_smoothing,
        )?;
        Ok(report)
    }
}
