//! Synthetic datasets with known ground truth.
//!
//! Every image has a unit latent vector `z` in `R^d`. A trial of subject `s`
//! is `A_s · diag(z) · B + σ·ε`: `A_s` (C × d) is a per-subject spatial
//! mixing, `B` (d × T) a temporal basis shared by all subjects. The signal is
//! linear in `z`, so a linear decoder can recover it exactly when `σ = 0`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{default_montage_63, NeuralTrial, Split, StimulusRecord, TrialSet};
use crate::error::{Error, Result};
use crate::params::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Training categories; test categories are numbered after them.
    pub n_categories: usize,
    pub n_test_categories: usize,
    pub images_per_category: usize,
    pub repetitions: usize,
    pub test_repetitions: usize,
    pub subjects: usize,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate_hz: f64,
    pub embed_dim: usize,
    pub noise_sigma: f64,
    /// Spread of image latents around their category latent.
    pub image_spread: f64,
    /// Samples before this time carry noise only.
    pub informative_from_ms: Option<f64>,
    /// When set, only these channels carry signal.
    pub informative_channels: Option<Vec<String>>,
    pub prompt_tokens: usize,
    pub prompt_dim: usize,
    pub pool_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_categories: 10,
            n_test_categories: 5,
            images_per_category: 10,
            repetitions: 4,
            test_repetitions: 4,
            subjects: 1,
            channels: 17,
            samples: 100,
            sample_rate_hz: 250.0,
            embed_dim: 16,
            noise_sigma: 0.0,
            image_spread: 0.5,
            informative_from_ms: None,
            informative_channels: None,
            prompt_tokens: 4,
            prompt_dim: 8,
            pool_dim: 8,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_categories", self.n_categories),
            ("n_test_categories", self.n_test_categories),
            ("images_per_category", self.images_per_category),
            ("repetitions", self.repetitions),
            ("test_repetitions", self.test_repetitions),
            ("subjects", self.subjects),
            ("channels", self.channels),
            ("samples", self.samples),
            ("embed_dim", self.embed_dim),
            ("prompt_tokens", self.prompt_tokens),
            ("prompt_dim", self.prompt_dim),
            ("pool_dim", self.pool_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("synthetic {name} must be positive")));
            }
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config("synthetic noise_sigma must be finite and ≥ 0".into()));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Config("synthetic sample_rate_hz must be positive".into()));
        }
        if !(self.image_spread >= 0.0) {
            return Err(Error::Config("synthetic image_spread must be ≥ 0".into()));
        }
        if let Some(names) = &self.informative_channels {
            let montage = self.channel_names();
            if let Some(bad) = names.iter().find(|n| !montage.contains(n)) {
                return Err(Error::Config(format!("informative channel {bad} is not in the montage")));
            }
        }
        Ok(())
    }

    /// The 63-channel montage names when `channels == 63`, else `Ch0, Ch1, …`.
    pub fn channel_names(&self) -> Vec<String> {
        if self.channels == 63 {
            default_montage_63()
        } else {
            (0..self.channels).map(|i| format!("Ch{i}")).collect()
        }
    }

    pub fn subject_ids(&self) -> Vec<String> {
        (1..=self.subjects).map(|s| format!("sub-{s:02}")).collect()
    }
}

/// Ground truth behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOracle {
    /// Unit latent per image; equals the image embedding.
    pub image_latents: BTreeMap<i64, Array1<f64>>,
    /// Unit latent per category; equals the coarse text embedding.
    pub category_latents: BTreeMap<i64, Array1<f64>>,
    /// Fine caption embedding per image.
    pub fine_latents: BTreeMap<i64, Array1<f64>>,
    /// Prompt token embeddings of the fused caption per image.
    pub prompt_tokens: BTreeMap<i64, Array2<f64>>,
    pub pooled_prompts: BTreeMap<i64, Array1<f64>>,
    pub spatial: BTreeMap<String, Array2<f64>>,
    pub temporal: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: TrialSet,
    pub test: TrialSet,
    pub oracle: SyntheticOracle,
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || StandardNormal.sample(rng))
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

const STREAM_LATENT: u64 = 0;
const STREAM_TEMPORAL: u64 = 1;
const STREAM_PROMPT: u64 = 2;
const STREAM_SPATIAL: u64 = 100;
const STREAM_NOISE: u64 = 10_000;

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let d = spec.embed_dim;
    let names = spec.channel_names();

    let mut rng = seeded_rng(spec.seed, STREAM_LATENT);
    let n_total = spec.n_categories + spec.n_test_categories;
    let mut category_latents = BTreeMap::new();
    for cat in 0..n_total as i64 {
        category_latents.insert(cat, unit(normal_vec(&mut rng, d)));
    }
    let mut catalogs = (Vec::new(), Vec::new());
    let mut image_latents = BTreeMap::new();
    let mut fine_latents = BTreeMap::new();
    for cat in 0..n_total as i64 {
        let test = cat as usize >= spec.n_categories;
        let n_img = if test { 1 } else { spec.images_per_category };
        for j in 0..n_img {
            let id = cat * 100 + j as i64;
            let u = unit(normal_vec(&mut rng, d));
            let z = unit(&category_latents[&cat] + &(u * spec.image_spread));
            let w = unit(normal_vec(&mut rng, d));
            fine_latents.insert(id, unit(&z + &(w * 0.1)));
            image_latents.insert(id, z);
            let rec = StimulusRecord {
                image_id: id,
                category_id: cat,
                image_ref: format!("synthetic/{id:06}.png"),
                coarse_text: format!("category {cat}"),
                fine_text: format!("image {id} of category {cat} with detail {j}"),
            };
            if test {
                catalogs.1.push(rec);
            } else {
                catalogs.0.push(rec);
            }
        }
    }

    let mut rng = seeded_rng(spec.seed, STREAM_TEMPORAL);
    let mut temporal = Array2::from_shape_simple_fn((d, spec.samples), || StandardNormal.sample(&mut rng));
    if let Some(from_ms) = spec.informative_from_ms {
        let first = (from_ms * spec.sample_rate_hz / 1000.0).round().max(0.0) as usize;
        for t in 0..first.min(spec.samples) {
            temporal.column_mut(t).fill(0.0);
        }
    }

    let mut rng = seeded_rng(spec.seed, STREAM_PROMPT);
    let maps: Vec<Array2<f64>> = (0..spec.prompt_tokens)
        .map(|_| {
            Array2::from_shape_simple_fn((spec.prompt_dim, d), || {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * (1.0 / d as f64).sqrt()
            })
        })
        .collect();
    let pool_map = Array2::from_shape_simple_fn((spec.pool_dim, d), || {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * (1.0 / d as f64).sqrt()
    });
    let mut prompt_tokens = BTreeMap::new();
    let mut pooled_prompts = BTreeMap::new();
    for (&id, fine) in &fine_latents {
        let cat = id / 100;
        let fused = unit(&category_latents[&cat] + fine);
        let mut tokens = Array2::zeros((spec.prompt_tokens, spec.prompt_dim));
        for (k, m) in maps.iter().enumerate() {
            tokens.row_mut(k).assign(&m.dot(&fused));
        }
        prompt_tokens.insert(id, tokens);
        pooled_prompts.insert(id, pool_map.dot(&fused));
    }

    let mut spatial = BTreeMap::new();
    for (s, subject) in spec.subject_ids().into_iter().enumerate() {
        let mut rng = seeded_rng(spec.seed, STREAM_SPATIAL + s as u64);
        let mut a = Array2::from_shape_simple_fn((spec.channels, d), || StandardNormal.sample(&mut rng));
        if let Some(keep) = &spec.informative_channels {
            for (c, name) in names.iter().enumerate() {
                if !keep.contains(name) {
                    a.row_mut(c).fill(0.0);
                }
            }
        }
        spatial.insert(subject, a);
    }

    let build = |catalog: &[StimulusRecord], reps: usize, split: Split, stream_offset: u64| {
        let mut trials = Vec::new();
        for (s, subject) in spec.subject_ids().into_iter().enumerate() {
            let mut rng = seeded_rng(spec.seed, STREAM_NOISE + 2 * s as u64 + stream_offset);
            let a = &spatial[&subject];
            for rec in catalog {
                let z = &image_latents[&rec.image_id];
                let clean = (a * &z.view().insert_axis(ndarray::Axis(0))).dot(&temporal);
                for r in 0..reps {
                    let signal = clean.mapv(|v| {
                        let e: f64 = if spec.noise_sigma > 0.0 {
                            StandardNormal.sample(&mut rng)
                        } else {
                            0.0
                        };
                        (v + spec.noise_sigma * e) as f32
                    });
                    trials.push(NeuralTrial {
                        signal,
                        subject_id: subject.clone(),
                        category_id: rec.category_id,
                        image_id: rec.image_id,
                        repetition: r as u32,
                        sample_rate_hz: spec.sample_rate_hz,
                        start_ms: 0.0,
                    });
                }
            }
        }
        TrialSet::new(
            trials,
            catalog.to_vec(),
            split,
            names.clone(),
            spec.sample_rate_hz,
            spec.samples,
            0.0,
        )
    };
    let train = build(&catalogs.0, spec.repetitions, Split::Train, 0)?;
    let test = build(&catalogs.1, spec.test_repetitions, Split::Test, 1)?;
    super::check_zero_shot(&train, &test)?;
    Ok(SyntheticDataset {
        train,
        test,
        oracle: SyntheticOracle {
            image_latents,
            category_latents,
            fine_latents,
            prompt_tokens,
            pooled_prompts,
            spatial,
            temporal,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_categories: 3,
            n_test_categories: 2,
            images_per_category: 1,
            repetitions: 3,
            channels: 4,
            samples: 20,
            embed_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_repetitions_are_identical() {
        let ds = generate_synthetic(&small()).unwrap();
        let t = &ds.train.trials;
        assert_eq!(t[0].image_id, t[1].image_id);
        assert_eq!(t[0].signal, t[1].signal);
        assert_eq!(t[1].signal, t[2].signal);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec { noise_sigma: 0.3, ..small() };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap().train, generate_synthetic(&other).unwrap().train);
    }

    #[test]
    fn splits_are_disjoint() {
        let spec = SyntheticSpec { n_categories: 10, n_test_categories: 5, ..small() };
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.train.category_ids().len(), 10);
        assert_eq!(ds.test.category_ids().len(), 5);
        assert!(crate::data::check_zero_shot(&ds.train, &ds.test).is_ok());
    }

    #[test]
    fn delayed_information_leaves_prefix_empty() {
        let spec = SyntheticSpec {
            informative_from_ms: Some(40.0),
            ..small()
        };
        let ds = generate_synthetic(&spec).unwrap();
        // 40 ms at 250 Hz is 10 samples.
        for t in &ds.train.trials {
            assert!(t.signal.slice(ndarray::s![.., ..10]).iter().all(|&v| v == 0.0));
            assert!(t.signal.slice(ndarray::s![.., 10..]).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn rejects_zero_counts() {
        let spec = SyntheticSpec { channels: 0, ..small() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }
}
