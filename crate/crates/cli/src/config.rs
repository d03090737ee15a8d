//! Experiment configuration.
//!
//! One TOML file with the sections `dataset`, `preprocess`, `model`,
//! `training`, `eval`, `bridge` and `output`, plus a top-level `seed`.
//! Unknown keys are rejected. Any leaf can be overridden from the
//! environment as `NEURALIGN__<SECTION>__<KEY>=<value>` (nested tables add
//! more `__` levels; values are parsed as TOML and fall back to a string).
//!
//! The top-level seed is the only source of randomness: it is copied into
//! every section that has a seed of its own.

use std::path::{Path, PathBuf};

use neuralign::alignment::AlignmentConfig;
use neuralign::bridge::{BridgeTrainConfig, PriorConfig, QFormerConfig};
use neuralign::data::{PreprocessConfig, SyntheticSpec};
use neuralign::encoder::EncoderConfig;
use neuralign::zeroshot::{AblationMode, CellStrategy};
use neuralign::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "NEURALIGN__";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub preprocess: PreprocessConfig,
    pub model: EncoderConfig,
    pub training: AlignmentConfig,
    pub eval: EvalSection,
    pub bridge: BridgeSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Dataset root with `train/` and `test/`; defaults to `<output>/dataset`.
    pub path: Option<PathBuf>,
    /// Directory with `image.tsv`, `text.tsv` and optionally `prompt.tsv`;
    /// defaults to `<dataset>/embeddings`.
    pub embeddings: Option<PathBuf>,
    /// Generator settings used by `synth`.
    pub synthetic: Option<SyntheticSpec>,
    /// Subjects to process; all subjects of the training split when absent.
    pub subjects: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Accuracies reported in `report.json` besides the top-1/top-5 tables.
    pub top_k: Vec<usize>,
    pub ablation: AblationSection,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            top_k: vec![1, 5],
            ablation: AblationSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub modes: Vec<AblationMode>,
    pub step_ms: f64,
    pub width_ms: f64,
    pub strategy: CellStrategy,
    /// Channel-group file; the built-in 63-channel map when absent.
    pub channel_map: Option<PathBuf>,
    /// Region sets of the spatial ablation; one cell per region of the map
    /// when empty.
    pub spatial_groups: Vec<Vec<String>>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            modes: vec![AblationMode::Expanding, AblationMode::Sliding, AblationMode::Decreasing],
            step_ms: 50.0,
            width_ms: 100.0,
            strategy: CellStrategy::Retrain,
            channel_map: None,
            spatial_groups: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeSection {
    pub qformer: QFormerConfig,
    pub prior: PriorConfig,
    pub train: BridgeTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("run") }
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `NEURALIGN__A__B=value` overrides to `table`. Returns the
/// overridden dotted keys.
pub fn apply_overrides(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<Vec<String>> {
    let mut applied = Vec::new();
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|p| p.to_ascii_lowercase()).collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed override variable {key}")));
        }
        let mut node = &mut *table;
        for part in &path[..path.len() - 1] {
            let entry = node
                .entry(part.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = match entry {
                toml::Value::Table(t) => t,
                _ => return Err(Error::Config(format!("{key}: {part} is not a table"))),
            };
        }
        node.insert(path[path.len() - 1].clone(), parse_env_value(&raw));
        applied.push(path.join("."));
    }
    Ok(applied)
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides, propagates the seed and
    /// validates.
    pub fn from_toml(text: &str, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        apply_overrides(&mut table, vars)?;
        let cfg: ExperimentConfig = table.try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
        let cfg = cfg.with_seed(None);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from the defaults when `None`) with the
    /// process environment as overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, std::env::vars())
    }

    /// Sets the top-level seed (when given) and copies it into every section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        let s = self.seed;
        if let Some(spec) = &mut self.dataset.synthetic {
            spec.seed = s;
        }
        self.model.seed = s;
        self.training.seed = s;
        self.bridge.qformer.seed = s;
        self.bridge.prior.seed = s;
        self.bridge.train.seed = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(spec) = &self.dataset.synthetic {
            spec.validate()?;
        }
        self.preprocess.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        if self.eval.top_k.iter().any(|&k| k == 0) {
            return Err(Error::Config("eval.top_k entries must be positive".into()));
        }
        let a = &self.eval.ablation;
        if !(a.step_ms > 0.0) || !(a.width_ms > 0.0) {
            return Err(Error::Config("ablation step_ms and width_ms must be positive".into()));
        }
        if let Some(subjects) = &self.dataset.subjects {
            if subjects.is_empty() {
                return Err(Error::Config("dataset.subjects is empty".into()));
            }
        }
        Ok(())
    }

    /// Bridge sections are only checked when the bridge is used.
    pub fn validate_bridge(&self) -> Result<()> {
        self.bridge.qformer.validate()?;
        self.bridge.prior.validate()?;
        self.bridge.train.validate()?;
        if self.bridge.qformer.input_dim != self.model.embed_dim {
            return Err(Error::Config(format!(
                "bridge.qformer.input_dim ({}) must equal model.embed_dim ({})",
                self.bridge.qformer.input_dim, self.model.embed_dim
            )));
        }
        if self.bridge.prior.dim != self.model.embed_dim {
            return Err(Error::Config(format!(
                "bridge.prior.dim ({}) must equal model.embed_dim ({})",
                self.bridge.prior.dim, self.model.embed_dim
            )));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> &Path {
        &self.output.dir
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.path.clone().unwrap_or_else(|| self.output.dir.join("dataset"))
    }

    pub fn embeddings_dir(&self) -> PathBuf {
        self.dataset.embeddings.clone().unwrap_or_else(|| self.dataset_dir().join("embeddings"))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_match_the_published_settings() {
        let c = ExperimentConfig::from_toml("", env(&[])).unwrap();
        assert_eq!(c.training.epochs, 100);
        assert_eq!(c.training.batch_size, 256);
        assert_eq!(c.training.lr, 2e-4);
        assert_eq!(c.training.alpha, 0.5);
        assert_eq!(c.training.beta, 2.0);
        assert_eq!(c.training.tau_init, 0.07);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("[training]\nepochz = 3\n", env(&[])),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_toml("bogus = 1\n", env(&[])).is_err());
    }

    #[test]
    fn environment_overrides_leaves() {
        let c = ExperimentConfig::from_toml(
            "[training]\nepochs = 3\n",
            env(&[
                ("NEURALIGN__TRAINING__EPOCHS", "7"),
                ("NEURALIGN__OUTPUT__DIR", "/tmp/x"),
                ("NEURALIGN__DATASET__SYNTHETIC__NOISE_SIGMA", "0.5"),
                ("OTHER", "1"),
            ]),
        )
        .unwrap();
        assert_eq!(c.training.epochs, 7);
        assert_eq!(c.output.dir, PathBuf::from("/tmp/x"));
        assert_eq!(c.dataset.synthetic.unwrap().noise_sigma, 0.5);
        assert!(ExperimentConfig::from_toml("", env(&[("NEURALIGN__TRAINING__NOPE", "1")])).is_err());
    }

    #[test]
    fn seed_reaches_every_section() {
        let c = ExperimentConfig::from_toml("seed = 9\n[dataset.synthetic]\n", env(&[])).unwrap();
        assert_eq!(c.model.seed, 9);
        assert_eq!(c.training.seed, 9);
        assert_eq!(c.bridge.prior.seed, 9);
        assert_eq!(c.dataset.synthetic.as_ref().unwrap().seed, 9);
        assert_eq!(c.with_seed(Some(2)).bridge.qformer.seed, 2);
    }
}
