use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ChannelGroupMap, NeuralTrial, TrialSet};
use crate::error::{Error, Result};

/// Weight of the diagonal target in the shrunk noise covariance.
pub const SHRINKAGE: f64 = 0.1;

/// Relative eigenvalue floor applied before the inverse square root.
const EIGEN_FLOOR: f64 = 1e-10;

/// Tolerance for treating floating-point window edges as equal.
const EDGE_TOL_MS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    /// `[-100, 0]` ms when the trials contain that much pre-stimulus data.
    Auto,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Baseline {
    Mode(BaselineMode),
    Interval([f64; 2]),
}

impl Default for Baseline {
    fn default() -> Self {
        Baseline::Mode(BaselineMode::Auto)
    }
}

impl Baseline {
    /// Interval to subtract for data starting at `start_ms`, if any.
    pub fn resolve(&self, start_ms: f64) -> Option<[f64; 2]> {
        match *self {
            Baseline::Mode(BaselineMode::Off) => None,
            Baseline::Mode(BaselineMode::Auto) => (start_ms <= -100.0 + EDGE_TOL_MS).then_some([-100.0, 0.0]),
            Baseline::Interval(iv) => Some(iv),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_rate_hz: f64,
    pub window_start_ms: f64,
    pub window_end_ms: f64,
    pub baseline: Baseline,
    pub noise_normalize: bool,
    pub average_repetitions: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_rate_hz: 250.0,
            window_start_ms: 0.0,
            window_end_ms: 1000.0,
            baseline: Baseline::default(),
            noise_normalize: true,
            average_repetitions: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_rate_hz > 0.0) {
            return Err(Error::Config("target_rate_hz must be positive".into()));
        }
        if !(self.window_start_ms < self.window_end_ms) {
            return Err(Error::Config(format!(
                "window_start_ms ({}) must be below window_end_ms ({})",
                self.window_start_ms, self.window_end_ms
            )));
        }
        if let Baseline::Interval([a, b]) = self.baseline {
            if !(a < b) {
                return Err(Error::Config(format!("baseline interval [{a}, {b}] is empty")));
            }
        }
        Ok(())
    }
}

fn sample_index(ms: f64, start_ms: f64, rate: f64) -> isize {
    ((ms - start_ms) * rate / 1000.0).round() as isize
}

fn bounds_check(trial_start: f64, trial_end: f64, start_ms: f64, end_ms: f64) -> Result<()> {
    if !(start_ms < end_ms)
        || start_ms < trial_start - EDGE_TOL_MS
        || end_ms > trial_end + EDGE_TOL_MS
    {
        return Err(Error::Bounds {
            start_ms,
            end_ms,
            min_ms: trial_start,
            max_ms: trial_end,
        });
    }
    Ok(())
}

/// Subtracts each channel's mean over `[start_ms, end_ms)`.
pub fn baseline_correct(trial: &NeuralTrial, interval: [f64; 2]) -> Result<NeuralTrial> {
    let [a, b] = interval;
    bounds_check(trial.start_ms, trial.end_ms(), a, b)?;
    let i0 = sample_index(a, trial.start_ms, trial.sample_rate_hz).max(0) as usize;
    let i1 = (sample_index(b, trial.start_ms, trial.sample_rate_hz).max(0) as usize).min(trial.samples());
    if i1 <= i0 {
        return Err(Error::Bounds {
            start_ms: a,
            end_ms: b,
            min_ms: trial.start_ms,
            max_ms: trial.end_ms(),
        });
    }
    let mut out = trial.clone();
    for mut row in out.signal.rows_mut() {
        let mean = row.slice(ndarray::s![i0..i1]).iter().map(|&v| v as f64).sum::<f64>()
            / (i1 - i0) as f64;
        row.mapv_inplace(|v| (v as f64 - mean) as f32);
    }
    Ok(out)
}

/// Hamming-windowed sinc low-pass with cutoff `0.4 / factor` cycles/sample,
/// `16·factor + 1` taps, unit DC gain.
pub fn lowpass_taps(factor: usize) -> Vec<f64> {
    let half = 8 * factor as isize;
    let fc = 0.4 / factor as f64;
    let len = (2 * half + 1) as f64;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|n| {
            let x = 2.0 * fc * n as f64;
            let sinc = if n == 0 {
                1.0
            } else {
                (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
            };
            let k = (n + half) as f64;
            let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * k / (len - 1.0)).cos();
            2.0 * fc * sinc * w
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

fn decimation_factor(source: f64, target: f64) -> Result<usize> {
    let err = || Error::UnsupportedRate {
        source_hz: source,
        target_hz: target,
    };
    if !(target > 0.0) || target > source {
        return Err(err());
    }
    let f = source / target;
    let r = f.round();
    if (f - r).abs() > 1e-9 * f || r < 1.0 {
        return Err(err());
    }
    Ok(r as usize)
}

/// Zero-phase anti-alias filter followed by integer decimation.
pub fn downsample(trial: &NeuralTrial, target_rate_hz: f64) -> Result<NeuralTrial> {
    let factor = decimation_factor(trial.sample_rate_hz, target_rate_hz)?;
    if factor == 1 {
        return Ok(trial.clone());
    }
    let taps = lowpass_taps(factor);
    let half = (taps.len() / 2) as isize;
    let t = trial.samples();
    let t_out = t / factor;
    let last = t as isize - 1;
    let mut out = Array2::<f32>::zeros((trial.channels(), t_out));
    for (row_in, mut row_out) in trial.signal.rows().into_iter().zip(out.rows_mut()) {
        for k in 0..t_out {
            let centre = (k * factor) as isize;
            let mut acc = 0.0f64;
            for (j, &h) in taps.iter().enumerate() {
                let idx = (centre + j as isize - half).clamp(0, last) as usize;
                acc += h * row_in[idx] as f64;
            }
            row_out[k] = acc as f32;
        }
    }
    Ok(NeuralTrial {
        signal: out,
        sample_rate_hz: target_rate_hz,
        ..trial.clone()
    })
}

/// Samples in `[start_ms, end_ms)`, times relative to stimulus onset.
pub fn crop_time_window(trial: &NeuralTrial, start_ms: f64, end_ms: f64) -> Result<NeuralTrial> {
    bounds_check(trial.start_ms, trial.end_ms(), start_ms, end_ms)?;
    let rate = trial.sample_rate_hz;
    let i0 = sample_index(start_ms, trial.start_ms, rate).max(0) as usize;
    let i1 = (sample_index(end_ms, trial.start_ms, rate).max(0) as usize).min(trial.samples());
    if i1 <= i0 {
        return Err(Error::Bounds {
            start_ms,
            end_ms,
            min_ms: trial.start_ms,
            max_ms: trial.end_ms(),
        });
    }
    Ok(NeuralTrial {
        signal: trial.signal.slice(ndarray::s![.., i0..i1]).to_owned(),
        start_ms: trial.start_ms + i0 as f64 * 1000.0 / rate,
        ..trial.clone()
    })
}

/// Same window as [`crop_time_window`], but samples outside it are zeroed
/// and the length is kept.
pub fn mask_time_window(trial: &NeuralTrial, start_ms: f64, end_ms: f64) -> Result<NeuralTrial> {
    let kept = crop_time_window(trial, start_ms, end_ms)?;
    let i0 = sample_index(kept.start_ms, trial.start_ms, trial.sample_rate_hz).max(0) as usize;
    let mut signal = Array2::zeros(trial.signal.dim());
    signal
        .slice_mut(ndarray::s![.., i0..i0 + kept.samples()])
        .assign(&kept.signal);
    Ok(NeuralTrial {
        signal,
        ..trial.clone()
    })
}

pub fn mask_set(ts: &TrialSet, start_ms: f64, end_ms: f64) -> Result<TrialSet> {
    let trials = ts
        .trials
        .par_iter()
        .map(|t| mask_time_window(t, start_ms, end_ms))
        .collect::<Result<Vec<_>>>()?;
    Ok(ts.with_trials(trials))
}

pub fn crop_set(ts: &TrialSet, start_ms: f64, end_ms: f64) -> Result<TrialSet> {
    if ts.is_empty() {
        bounds_check(ts.start_ms, ts.end_ms(), start_ms, end_ms)?;
        return Ok(ts.clone());
    }
    let trials = ts
        .trials
        .par_iter()
        .map(|t| crop_time_window(t, start_ms, end_ms))
        .collect::<Result<Vec<_>>>()?;
    Ok(ts.with_trials(trials))
}

pub fn downsample_set(ts: &TrialSet, target_rate_hz: f64) -> Result<TrialSet> {
    decimation_factor(ts.sample_rate_hz, target_rate_hz)?;
    let trials = ts
        .trials
        .par_iter()
        .map(|t| downsample(t, target_rate_hz))
        .collect::<Result<Vec<_>>>()?;
    let mut out = ts.with_trials(trials);
    out.sample_rate_hz = target_rate_hz;
    out.samples = ts.samples / decimation_factor(ts.sample_rate_hz, target_rate_hz)?;
    Ok(out)
}

/// Restricts every trial to the union of `regions`, keeping montage order.
pub fn select_channels(ts: &TrialSet, regions: &[String], map: &ChannelGroupMap) -> Result<TrialSet> {
    let idx = map.select_indices(regions, &ts.channel_names)?;
    let trials = ts
        .trials
        .iter()
        .map(|t| NeuralTrial {
            signal: t.signal.select(Axis(0), &idx),
            ..t.clone()
        })
        .collect();
    let mut out = ts.with_trials(trials);
    out.channel_names = idx.iter().map(|&i| ts.channel_names[i].clone()).collect();
    Ok(out)
}

/// Zeroes every channel outside `regions`; the montage is kept.
pub fn mask_channels(ts: &TrialSet, regions: &[String], map: &ChannelGroupMap) -> Result<TrialSet> {
    let idx = map.select_indices(regions, &ts.channel_names)?;
    let trials = ts
        .trials
        .iter()
        .map(|t| {
            let mut signal = Array2::zeros(t.signal.dim());
            for &c in &idx {
                signal.row_mut(c).assign(&t.signal.row(c));
            }
            NeuralTrial {
                signal,
                ..t.clone()
            }
        })
        .collect();
    Ok(ts.with_trials(trials))
}

/// Groups of trial indices sharing `(subject, image)`, in order of first
/// appearance.
fn repetition_groups(ts: &TrialSet) -> Vec<Vec<usize>> {
    let mut order: Vec<(String, i64)> = Vec::new();
    let mut groups: BTreeMap<(String, i64), Vec<usize>> = BTreeMap::new();
    for (i, t) in ts.trials.iter().enumerate() {
        let key = (t.subject_id.clone(), t.image_id);
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(i);
    }
    order.into_iter().map(|k| groups.remove(&k).unwrap()).collect()
}

/// One trial per `(subject, image)` holding the mean over repetitions.
pub fn average_repetitions(ts: &TrialSet) -> Result<TrialSet> {
    let mut out = Vec::new();
    for group in repetition_groups(ts) {
        let first = &ts.trials[group[0]];
        let mut acc = Array2::<f64>::zeros(first.signal.dim());
        for &i in &group {
            let s = &ts.trials[i].signal;
            if s.dim() != acc.dim() {
                return Err(Error::Format(format!(
                    "ragged repetitions for image {} of {}",
                    first.image_id, first.subject_id
                )));
            }
            Zip::from(&mut acc).and(s).for_each(|a, &v| *a += v as f64);
        }
        let n = group.len() as f64;
        out.push(NeuralTrial {
            signal: acc.mapv(|v| (v / n) as f32),
            repetition: 0,
            ..first.clone()
        });
    }
    Ok(ts.with_trials(out))
}


/// Per-subject `C × C` whitening matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    pub matrices: BTreeMap<String, Array2<f64>>,
}

impl Whitener {
    pub fn matrix(&self, subject: &str) -> Option<&Array2<f64>> {
        self.matrices.get(subject)
    }

    pub fn apply_trial(&self, trial: &NeuralTrial) -> Result<NeuralTrial> {
        let w = self.matrix(&trial.subject_id).ok_or_else(|| {
            Error::Protocol(format!("no whitener fitted for subject {}", trial.subject_id))
        })?;
        if w.nrows() != trial.channels() {
            return Err(Error::Shape(format!(
                "whitener is {}×{}, trial has {} channels",
                w.nrows(),
                w.ncols(),
                trial.channels()
            )));
        }
        let x = trial.signal.mapv(|v| v as f64);
        Ok(NeuralTrial {
            signal: w.dot(&x).mapv(|v| v as f32),
            ..trial.clone()
        })
    }

    pub fn apply(&self, ts: &TrialSet) -> Result<TrialSet> {
        let trials = ts
            .trials
            .par_iter()
            .map(|t| self.apply_trial(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(ts.with_trials(trials))
    }
}

/// Pooled residual covariance over repetitions: for every `(image, t)` the
/// deviations of each repetition from the repetition mean, summed over time
/// and images, divided by `T · Σ (n_g − 1)`.
fn residual_covariance(ts: &TrialSet, group_idx: &[Vec<usize>]) -> Option<Array2<f64>> {
    let c = ts.channels();
    let mut cov = Array2::<f64>::zeros((c, c));
    let mut dof = 0usize;
    for group in group_idx.iter().filter(|g| g.len() >= 2) {
        let mut mean = Array2::<f64>::zeros((c, ts.samples));
        for &i in group {
            Zip::from(&mut mean)
                .and(&ts.trials[i].signal)
                .for_each(|m, &v| *m += v as f64);
        }
        mean /= group.len() as f64;
        for &i in group {
            let resid = ts.trials[i].signal.mapv(|v| v as f64) - &mean;
            cov += &resid.dot(&resid.t());
        }
        dof += (group.len() - 1) * ts.samples;
    }
    (dof > 0).then(|| cov / dof as f64)
}

fn inverse_sqrt(cov: &Array2<f64>, subject: &str) -> Array2<f64> {
    let c = cov.nrows();
    let trace: f64 = cov.diag().sum();
    if !(trace > 0.0) {
        log::warn!("noise covariance of {subject} is zero; whitening with the identity");
        return Array2::eye(c);
    }
    let shrunk = Array2::from_shape_fn((c, c), |(i, j)| {
        if i == j {
            cov[[i, j]]
        } else {
            (1.0 - SHRINKAGE) * cov[[i, j]]
        }
    });
    let m = DMatrix::from_fn(c, c, |i, j| 0.5 * (shrunk[[i, j]] + shrunk[[j, i]]));
    let eig = SymmetricEigen::new(m);
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let floor = EIGEN_FLOOR * max;
    let floored = eig.eigenvalues.iter().filter(|&&l| l < floor).count();
    if floored > 0 {
        log::warn!(
            "noise covariance of {subject} is singular ({floored} eigenvalues below {floor:e}); flooring"
        );
    }
    let d: Vec<f64> = eig.eigenvalues.iter().map(|&l| 1.0 / l.max(floor).sqrt()).collect();
    let v = &eig.eigenvectors;
    Array2::from_shape_fn((c, c), |(i, j)| (0..c).map(|k| v[(i, k)] * d[k] * v[(j, k)]).sum())
}

/// Fits one whitener per subject on repeated presentations and applies it.
pub fn noise_normalize(train: &TrialSet) -> Result<(TrialSet, Whitener)> {
    let mut matrices = BTreeMap::new();
    for subject in train.subjects() {
        let sub = train.subject(&subject);
        let groups = repetition_groups(&sub);
        let cov = residual_covariance(&sub, &groups).ok_or_else(|| {
            Error::Degenerate(format!(
                "subject {subject} has no image with two or more repetitions; noise covariance is not estimable"
            ))
        })?;
        matrices.insert(subject.clone(), inverse_sqrt(&cov, &subject));
    }
    let w = Whitener { matrices };
    let whitened = w.apply(train)?;
    Ok((whitened, w))
}

/// The full chain for a train/test pair: baseline, downsample, crop, noise
/// normalisation fitted on train, repetition averaging.
pub fn preprocess_pair(
    train: &TrialSet,
    test: &TrialSet,
    cfg: &PreprocessConfig,
) -> Result<(TrialSet, TrialSet, Option<Whitener>)> {
    cfg.validate()?;
    let stage = |ts: &TrialSet| -> Result<TrialSet> {
        let ts = match cfg.baseline.resolve(ts.start_ms) {
            Some(iv) => {
                let trials = ts
                    .trials
                    .par_iter()
                    .map(|t| baseline_correct(t, iv))
                    .collect::<Result<Vec<_>>>()?;
                ts.with_trials(trials)
            }
            None => ts.clone(),
        };
        let ts = downsample_set(&ts, cfg.target_rate_hz)?;
        crop_set(&ts, cfg.window_start_ms, cfg.window_end_ms)
    };
    let mut train = stage(train)?;
    let mut test = stage(test)?;
    let mut whitener = None;
    if cfg.noise_normalize {
        let (w_train, w) = noise_normalize(&train)?;
        test = w.apply(&test)?;
        train = w_train;
        whitener = Some(w);
    }
    if cfg.average_repetitions {
        train = average_repetitions(&train)?;
        test = average_repetitions(&test)?;
    }
    for (name, ts) in [("train", &train), ("test", &test)] {
        if ts.trials.iter().any(|t| !t.is_finite()) {
            return Err(Error::Degenerate(format!("non-finite samples in preprocessed {name} set")));
        }
    }
    Ok((train, test, whitener))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{toy_set, Split};
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn trial(signal: Array2<f32>, rate: f64) -> NeuralTrial {
        NeuralTrial {
            signal,
            subject_id: "s".into(),
            category_id: 0,
            image_id: 0,
            repetition: 0,
            sample_rate_hz: rate,
            start_ms: 0.0,
        }
    }

    #[test]
    fn downsample_1000_to_250() {
        let t = trial(Array2::from_shape_fn((2, 1000), |(c, i)| (c + i) as f32), 1000.0);
        let d = downsample(&t, 250.0).unwrap();
        assert_eq!(d.samples(), 250);
        assert_eq!(d.sample_rate_hz, 250.0);
    }

    #[test]
    fn downsample_identity_and_dc() {
        let t = trial(Array2::from_elem((3, 400), 5.0), 1000.0);
        assert_eq!(downsample(&t, 1000.0).unwrap(), t);
        let d = downsample(&t, 250.0).unwrap();
        assert!(d.signal.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn non_integer_factor_is_rejected() {
        let t = trial(Array2::zeros((1, 100)), 1000.0);
        assert!(matches!(downsample(&t, 300.0), Err(Error::UnsupportedRate { .. })));
        assert!(matches!(downsample(&t, 2000.0), Err(Error::UnsupportedRate { .. })));
    }

    #[test]
    fn low_pass_attenuates_above_nyquist() {
        // A tone at 0.45 × source rate lies far above the new Nyquist limit.
        let t = trial(
            Array2::from_shape_fn((1, 4000), |(_, i)| (2.0 * std::f64::consts::PI * 0.45 * i as f64).sin() as f32),
            1000.0,
        );
        let d = downsample(&t, 250.0).unwrap();
        let rms = (d.signal.slice(ndarray::s![.., 20..980]).iter().map(|v| (v * v) as f64).sum::<f64>() / 960.0).sqrt();
        assert!(rms < 0.01, "rms {rms}");
    }

    #[test]
    fn crop_sample_counts() {
        let t = trial(Array2::from_shape_fn((2, 250), |(c, i)| (c * 1000 + i) as f32), 250.0);
        assert_eq!(crop_time_window(&t, 0.0, 1000.0).unwrap().samples(), 250);
        assert_eq!(crop_time_window(&t, 400.0, 500.0).unwrap().samples(), 25);
        let a = crop_time_window(&t, 0.0, 500.0).unwrap();
        let b = crop_time_window(&t, 500.0, 1000.0).unwrap();
        assert_eq!(b.start_ms, 500.0);
        let joined = ndarray::concatenate(Axis(1), &[a.signal.view(), b.signal.view()]).unwrap();
        assert_eq!(joined, t.signal);
        assert!(matches!(crop_time_window(&t, -10.0, 100.0), Err(Error::Bounds { .. })));
        assert!(matches!(crop_time_window(&t, 100.0, 1100.0), Err(Error::Bounds { .. })));
        assert!(matches!(crop_time_window(&t, 300.0, 300.0), Err(Error::Bounds { .. })));
    }

    #[test]
    fn average_of_constants() {
        let mut ts = toy_set(Split::Train, &[1], 2, 2, 3);
        ts.trials[0].signal.fill(1.0);
        ts.trials[1].signal.fill(3.0);
        let avg = average_repetitions(&ts).unwrap();
        assert_eq!(avg.len(), 1);
        assert!(avg.trials[0].signal.iter().all(|&v| v == 2.0));
        assert_eq!(avg.trials[0].repetition, 0);
    }

    #[test]
    fn average_single_repetition_is_identity() {
        let ts = toy_set(Split::Train, &[1, 2], 1, 2, 3);
        assert_eq!(average_repetitions(&ts).unwrap(), ts);
    }

    #[test]
    fn baseline_subtracts_prestimulus_mean() {
        let mut t = trial(Array2::from_elem((1, 50), 2.0), 250.0);
        t.start_ms = -200.0;
        let out = baseline_correct(&t, [-100.0, 0.0]).unwrap();
        assert!(out.signal.iter().all(|&v| v == 0.0));
        assert_eq!(Baseline::default().resolve(-200.0), Some([-100.0, 0.0]));
        assert_eq!(Baseline::default().resolve(0.0), None);
    }

    fn noisy_set(cov_sqrt: &Array2<f64>, images: usize, reps: u32, t: usize, seed: u64) -> TrialSet {
        let c = cov_sqrt.nrows();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut base = toy_set(Split::Train, &(0..images as i64).collect::<Vec<_>>(), reps, c, t);
        for tr in &mut base.trials {
            let z = Array2::from_shape_simple_fn((c, t), || StandardNormal.sample(&mut rng));
            let x: Array2<f64> = cov_sqrt.dot(&z);
            tr.signal = x.mapv(|v| v as f32) + tr.image_id as f32 * 0.01;
        }
        base
    }

    #[test]
    fn whitening_diag_4_1_halves_channel_zero() {
        let s = ndarray::array![[2.0, 0.0], [0.0, 1.0]];
        let ts = noisy_set(&s, 20, 4, 200, 3);
        let (_, w) = noise_normalize(&ts).unwrap();
        let m = w.matrix("sub-01").unwrap();
        assert!((m[[0, 0]] - 0.5).abs() < 0.03, "{m}");
        assert!((m[[1, 1]] - 1.0).abs() < 0.06, "{m}");
    }

    #[test]
    fn whitening_white_noise_is_near_identity() {
        let ts = noisy_set(&Array2::eye(4), 20, 4, 200, 5);
        let (_, w) = noise_normalize(&ts).unwrap();
        let diff = w.matrix("sub-01").unwrap() - &Array2::<f64>::eye(4);
        let fro = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(fro < 0.1 * 2.0, "frobenius {fro}");
    }

    #[test]
    fn whitening_is_not_idempotent() {
        let s = ndarray::array![[2.0, 0.0], [0.5, 1.0]];
        let ts = noisy_set(&s, 10, 3, 100, 9);
        let (once, w) = noise_normalize(&ts).unwrap();
        let twice = w.apply(&once).unwrap();
        assert_ne!(once, twice);
    }

    #[test]
    fn single_repetition_cannot_be_whitened() {
        let ts = toy_set(Split::Train, &[1, 2], 1, 2, 3);
        assert!(matches!(noise_normalize(&ts), Err(Error::Degenerate(_))));
    }

    #[test]
    fn zero_covariance_falls_back_to_identity() {
        let ts = toy_set(Split::Train, &[1], 2, 2, 3);
        let mut ts = ts;
        ts.trials[1].signal = ts.trials[0].signal.clone();
        let (_, w) = noise_normalize(&ts).unwrap();
        assert_eq!(w.matrix("sub-01").unwrap(), &Array2::<f64>::eye(2));
    }
}
