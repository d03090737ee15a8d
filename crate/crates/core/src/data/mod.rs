//! Trials, stimulus catalogs and the preprocessing chain.

mod channels;
mod io;
mod preprocess;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use channels::{default_montage_63, ChannelGroupMap, DEFAULT_GROUP_MAP_63};
pub use io::{load_dataset, load_trialset, write_dataset, write_trialset};
pub use preprocess::{
    average_repetitions, baseline_correct, crop_set, crop_time_window, downsample, downsample_set,
    lowpass_taps, mask_channels, mask_set, mask_time_window, noise_normalize, preprocess_pair, select_channels, Baseline, BaselineMode,
    PreprocessConfig, Whitener, SHRINKAGE,
};
pub use synthetic::{generate_synthetic, SyntheticDataset, SyntheticOracle, SyntheticSpec};

/// One channels × samples recording.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralTrial {
    pub signal: Array2<f32>,
    pub subject_id: String,
    pub category_id: i64,
    pub image_id: i64,
    pub repetition: u32,
    pub sample_rate_hz: f64,
    /// Time of the first sample relative to stimulus onset.
    pub start_ms: f64,
}

impl NeuralTrial {
    pub fn channels(&self) -> usize {
        self.signal.nrows()
    }

    pub fn samples(&self) -> usize {
        self.signal.ncols()
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples() as f64 * 1000.0 / self.sample_rate_hz
    }

    pub fn end_ms(&self) -> f64 {
        self.start_ms + self.duration_ms()
    }

    pub fn is_finite(&self) -> bool {
        self.signal.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusRecord {
    pub image_id: i64,
    pub category_id: i64,
    pub image_ref: String,
    /// Category label only.
    pub coarse_text: String,
    /// Detailed caption.
    pub fine_text: String,
}

impl StimulusRecord {
    /// Text prompt combining both granularities, `"<coarse>. <fine>"`.
    pub fn fused_prompt(&self) -> String {
        format!("{}. {}", self.coarse_text, self.fine_text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub trials: Vec<NeuralTrial>,
    pub catalog: Vec<StimulusRecord>,
    pub split: Split,
    pub channel_names: Vec<String>,
    pub sample_rate_hz: f64,
    pub samples: usize,
    pub start_ms: f64,
}

impl TrialSet {
    /// Validates the set-level invariants and returns the set.
    pub fn new(
        trials: Vec<NeuralTrial>,
        catalog: Vec<StimulusRecord>,
        split: Split,
        channel_names: Vec<String>,
        sample_rate_hz: f64,
        samples: usize,
        start_ms: f64,
    ) -> Result<Self> {
        let ts = Self {
            trials,
            catalog,
            split,
            channel_names,
            sample_rate_hz,
            samples,
            start_ms,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Format("sample rate must be positive".into()));
        }
        let c = self.channel_names.len();
        for (i, t) in self.trials.iter().enumerate() {
            if t.signal.dim() != (c, self.samples) {
                return Err(Error::Format(format!(
                    "trial {i} has shape {:?}, expected ({c}, {})",
                    t.signal.dim(),
                    self.samples
                )));
            }
            if t.sample_rate_hz != self.sample_rate_hz || t.start_ms != self.start_ms {
                return Err(Error::Format(format!("trial {i} disagrees on time base")));
            }
        }
        let mut seen = BTreeSet::new();
        for rec in &self.catalog {
            if !seen.insert(rec.image_id) {
                return Err(Error::Format(format!("duplicate image_id {} in catalog", rec.image_id)));
            }
            if rec.coarse_text.trim().is_empty() || rec.fine_text.trim().is_empty() {
                return Err(Error::Format(format!("empty text for image {}", rec.image_id)));
            }
        }
        let by_id = self.catalog_index();
        for t in &self.trials {
            match by_id.get(&t.image_id) {
                None => {
                    return Err(Error::Format(format!("trial references unknown image {}", t.image_id)))
                }
                Some(rec) if rec.category_id != t.category_id => {
                    return Err(Error::Format(format!(
                        "trial for image {} has category {} but catalog says {}",
                        t.image_id, t.category_id, rec.category_id
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples as f64 * 1000.0 / self.sample_rate_hz
    }

    pub fn end_ms(&self) -> f64 {
        self.start_ms + self.duration_ms()
    }

    pub fn catalog_index(&self) -> BTreeMap<i64, &StimulusRecord> {
        self.catalog.iter().map(|r| (r.image_id, r)).collect()
    }

    pub fn stimulus(&self, image_id: i64) -> Option<&StimulusRecord> {
        self.catalog.iter().find(|r| r.image_id == image_id)
    }

    pub fn category_ids(&self) -> BTreeSet<i64> {
        self.catalog.iter().map(|r| r.category_id).collect()
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.trials
            .iter()
            .filter(|t| seen.insert(t.subject_id.clone()))
            .map(|t| t.subject_id.clone())
            .collect()
    }

    /// Same metadata, different trials.
    pub fn with_trials(&self, trials: Vec<NeuralTrial>) -> TrialSet {
        let (samples, rate, start, c) = trials
            .first()
            .map(|t| (t.samples(), t.sample_rate_hz, t.start_ms, t.channels()))
            .unwrap_or((self.samples, self.sample_rate_hz, self.start_ms, self.channels()));
        debug_assert_eq!(c, self.channels());
        TrialSet {
            trials,
            catalog: self.catalog.clone(),
            split: self.split,
            channel_names: self.channel_names.clone(),
            sample_rate_hz: rate,
            samples,
            start_ms: start,
        }
    }

    /// Trials of one subject.
    pub fn subject(&self, subject_id: &str) -> TrialSet {
        self.with_trials(
            self.trials
                .iter()
                .filter(|t| t.subject_id == subject_id)
                .cloned()
                .collect(),
        )
    }
}

/// Fails when any category appears in both sets.
pub fn check_zero_shot(train: &TrialSet, test: &TrialSet) -> Result<()> {
    let shared: Vec<i64> = train
        .category_ids()
        .intersection(&test.category_ids())
        .copied()
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::ZeroShotViolation { categories: shared })
    }
}

#[cfg(test)]
pub(crate) fn toy_set(split: Split, categories: &[i64], reps: u32, c: usize, t: usize) -> TrialSet {
    let catalog: Vec<StimulusRecord> = categories
        .iter()
        .enumerate()
        .map(|(i, &cat)| StimulusRecord {
            image_id: 100 + i as i64 + cat * 1000,
            category_id: cat,
            image_ref: format!("img-{cat}-{i}"),
            coarse_text: format!("cat {cat}"),
            fine_text: format!("a detailed picture of cat {cat}"),
        })
        .collect();
    let mut trials = Vec::new();
    for rec in &catalog {
        for r in 0..reps {
            trials.push(NeuralTrial {
                signal: Array2::from_shape_fn((c, t), |(ci, ti)| {
                    (rec.image_id as f32) * 0.001 + ci as f32 * 0.1 + ti as f32 * 0.01 + r as f32
                }),
                subject_id: "sub-01".into(),
                category_id: rec.category_id,
                image_id: rec.image_id,
                repetition: r,
                sample_rate_hz: 250.0,
                start_ms: 0.0,
            });
        }
    }
    let names = (0..c).map(|i| format!("Ch{i}")).collect();
    TrialSet::new(trials, catalog, split, names, 250.0, t, 0.0).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shot_check_reports_shared_categories() {
        let train = toy_set(Split::Train, &[1, 7], 1, 2, 4);
        let test = toy_set(Split::Test, &[7, 9], 1, 2, 4);
        match check_zero_shot(&train, &test) {
            Err(Error::ZeroShotViolation { categories }) => assert_eq!(categories, vec![7]),
            other => panic!("unexpected {other:?}"),
        }
        let test = toy_set(Split::Test, &[8, 9], 1, 2, 4);
        assert!(check_zero_shot(&train, &test).is_ok());
    }

    #[test]
    fn rejects_inconsistent_trial_shapes() {
        let mut ts = toy_set(Split::Train, &[1], 2, 2, 4);
        ts.trials[1].signal = Array2::zeros((2, 5));
        assert!(matches!(ts.validate(), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_empty_texts() {
        let mut ts = toy_set(Split::Train, &[1], 1, 2, 4);
        ts.catalog[0].fine_text = "  ".into();
        assert!(ts.validate().is_err());
    }
}
