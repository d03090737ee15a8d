mod ablate;
mod eval;
mod export;
mod grads;
mod metrics;
mod synth;
mod train;

use std::path::{Path, PathBuf};

use neuralign::data::{load_dataset, preprocess_pair, TrialSet};
use neuralign::embed::Providers;
use neuralign::encoder::{AlignmentModel, EncoderConfig};
use neuralign::params::write_atomic;
use neuralign::{Error, Result};
use serde::{Deserialize, Serialize};

pub use ablate::{ablate, curve_table, mode_name};
pub use eval::eval;
pub use export::export;
pub use grads::{check_grads, gradient_report};
pub use metrics::{build_extractors, metrics};
pub use synth::synth;
pub use train::train;

use crate::config::ExperimentConfig;
use crate::manifest::CommandRecord;

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub force: bool,
}

impl Ctx {
    pub fn out(&self) -> &Path {
        self.cfg.output_dir()
    }

    pub fn subject_dir(&self, stage: &str, subject: &str) -> PathBuf {
        self.out().join(stage).join(subject)
    }

    pub fn model_path(&self, subject: &str) -> PathBuf {
        self.subject_dir("train", subject).join(BEST_MODEL)
    }
}

pub const BEST_MODEL: &str = "best.model";
pub const STATE_FILE: &str = "state.ckpt";
pub const PROVENANCE_FILE: &str = "provenance.json";

/// Preprocessed splits of the configured dataset and its providers.
pub struct Prepared {
    pub train: TrialSet,
    pub test: TrialSet,
    pub providers: Providers,
    pub subjects: Vec<String>,
}

pub fn prepare(cfg: &ExperimentConfig, rec: &mut CommandRecord) -> Result<Prepared> {
    let root = cfg.dataset_dir();
    if !root.join("train").is_dir() || !root.join("test").is_dir() {
        return Err(Error::Config(format!(
            "no dataset at {} (expected train/ and test/; run `neuralign synth` for synthetic data)",
            root.display()
        )));
    }
    let emb_dir = cfg.embeddings_dir();
    if !emb_dir.is_dir() {
        return Err(Error::Config(format!("no embedding tables at {}", emb_dir.display())));
    }
    rec.hash_inputs(&root)?;
    rec.hash_inputs(&emb_dir)?;
    let (train, test) = rec.time("load", |_| load_dataset(&root))?;
    let providers = Providers::from_dir(&emb_dir)?;
    let (train, test, _) = rec.time("preprocess", |_| preprocess_pair(&train, &test, &cfg.preprocess))?;
    let subjects = match &cfg.dataset.subjects {
        Some(s) => s.clone(),
        None => train.subjects(),
    };
    for s in &subjects {
        let in_train = train.trials.iter().any(|t| &t.subject_id == s);
        let in_test = test.trials.iter().any(|t| &t.subject_id == s);
        if !in_train || !in_test {
            return Err(Error::Config(format!("subject {s} is missing from the train or test split")));
        }
    }
    rec.fingerprints.insert("providers".into(), providers.fingerprint());
    Ok(Prepared {
        train,
        test,
        providers,
        subjects,
    })
}

/// What a trained model was fitted against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub providers: String,
    pub encoder: EncoderConfig,
    pub model: String,
}

impl Provenance {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }
}

/// Loads a trained model and refuses it when it was trained against other
/// providers or a different encoder configuration.
pub fn load_checked_model(
    ctx: &Ctx,
    subject: &str,
    path: Option<&Path>,
    prep: &Prepared,
) -> Result<AlignmentModel> {
    let default_path = ctx.model_path(subject);
    let path = path.unwrap_or(&default_path);
    if !path.exists() {
        return Err(Error::Config(format!(
            "no trained model for {subject} at {} (run `neuralign train`)",
            path.display()
        )));
    }
    let model = AlignmentModel::load(path)?;
    let expected = ctx.cfg.model.with_input(prep.train.channels(), prep.train.samples);
    if model.config != expected {
        return Err(Error::Config(format!(
            "checkpoint {} does not match the configured encoder (fingerprint mismatch)",
            path.display()
        )));
    }
    let prov_path = path.with_file_name(PROVENANCE_FILE);
    if let Ok(bytes) = std::fs::read(&prov_path) {
        let prov: Provenance =
            serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", prov_path.display())))?;
        let fp = prep.providers.fingerprint();
        if prov.providers != fp {
            return Err(Error::Config(format!(
                "checkpoint {} was trained against providers {} but the configured ones are {fp} (fingerprint mismatch)",
                path.display(),
                prov.providers
            )));
        }
        if prov.model != model.fingerprint() {
            return Err(Error::Config(format!("checkpoint {} changed after training (fingerprint mismatch)", path.display())));
        }
    }
    Ok(model)
}

/// Writes `text` to `path` atomically, creating parent directories.
pub fn write_report(path: &Path, text: &str, rec: &mut CommandRecord) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(path, text.as_bytes())?;
    rec.report(path);
    Ok(())
}

pub fn to_json_pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}
