use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{seeded_rng, Adam, AdamConfig, ParamSet};

const HOLDOUT_STREAM: u64 = 11;
const SHUFFLE_STREAM: u64 = 1 << 33;
const NOISE_STREAM: u64 = 1 << 34;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of pairs held out for the reported error.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for BridgeTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 200,
            batch_size: 64,
            holdout: 0.2,
            seed: 0,
        }
    }
}

impl BridgeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("bridge lr must be a finite non-negative number".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("bridge epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config("bridge holdout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// `(train, held_out)` index sets over `n` pairs.
    pub fn split(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(self.seed, HOLDOUT_STREAM));
        let mut k = (n as f64 * self.holdout).round() as usize;
        if self.holdout > 0.0 && k == 0 && n >= 2 {
            k = 1;
        }
        if k >= n {
            return Err(Error::Config(format!("{n} pairs leave nothing to train on")));
        }
        let mut held = order[..k].to_vec();
        let mut train = order[k..].to_vec();
        held.sort_unstable();
        train.sort_unstable();
        Ok((train, held))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    pub heldout_mse: Option<f64>,
    pub n_train: usize,
    pub n_heldout: usize,
}

/// Adam on `params` over mini-batches of pair indices. `loss` receives the
/// batch and an epoch-seeded generator for any sampling it needs; shuffling
/// uses a separate stream so that draws inside `loss` never shift batches.
pub(crate) fn fit_params(
    params: &mut ParamSet,
    n: usize,
    cfg: &BridgeTrainConfig,
    what: &str,
    loss: impl Fn(&mut Graph, &ParamSet, &[usize], &mut ChaCha8Rng) -> Var,
    heldout_error: impl Fn(&ParamSet, &[usize]) -> Result<f64>,
) -> Result<FitReport> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config(format!("no pairs to train the {what} on")));
    }
    let (train, held) = cfg.split(n)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), params);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut seeded_rng(cfg.seed, SHUFFLE_STREAM + epoch as u64));
        let mut noise = seeded_rng(cfg.seed, NOISE_STREAM + epoch as u64);
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let out = loss(&mut g, params, batch, &mut noise);
            let value = g.scalar(out);
            let grads = g.backward(out);
            let grads = g.param_grads(&grads);
            if !value.is_finite() || grads.values().any(|v| v.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite {
                    epoch,
                    step: adam.step as usize + 1,
                    detail: format!("{what} loss {value}"),
                });
            }
            adam.update(params, &grads);
            sum += value;
            batches += 1;
        }
        history.push(sum / batches as f64);
    }
    let heldout_mse = if held.is_empty() {
        None
    } else {
        Some(heldout_error(params, &held)?)
    };
    Ok(FitReport {
        train_loss: history,
        heldout_mse,
        n_train: train.len(),
        n_heldout: held.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let cfg = BridgeTrainConfig::default();
        let (t, h) = cfg.split(10).unwrap();
        assert_eq!((t.len(), h.len()), (8, 2));
        let cfg = BridgeTrainConfig { holdout: 0.01, ..cfg };
        assert_eq!(cfg.split(10).unwrap().1.len(), 1);
        assert!(cfg.split(1).is_ok());
        assert!(BridgeTrainConfig { holdout: 1.0, ..cfg }.validate().is_err());
    }
}
