//! Mini-batch Adam training of encoder, projectors and temperature against
//! frozen provider embeddings.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::loss::{loss_graph, LossBreakdown, LossConfig, LossTerms, Tasks, TextGranularity};
use crate::autodiff::Graph;
use crate::data::{NeuralTrial, TrialSet};
use crate::embed::CatalogEmbeddings;
use crate::encoder::{encoder_graph, projector_graph, stack_trials, AlignmentModel, EncoderConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, GradCheckReport};
use crate::params::{seeded_rng, Adam, AdamConfig, ParamSet, TensorFile};
use crate::zeroshot::{rank_by_cosine, topk_accuracy, Task};

const STATE_KIND: &str = "train-state";
const VAL_STREAM: u64 = 1;
/// Epoch `e` draws shuffling and dropout from stream `EPOCH_STREAM + e`.
const EPOCH_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau_init: f64,
    pub seed: u64,
    pub val_count: usize,
    pub text_granularity: TextGranularity,
    pub loss_terms: LossTerms,
    pub tasks: Tasks,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 2.0,
            lr: 2e-4,
            epochs: 100,
            batch_size: 256,
            tau_init: 0.07,
            seed: 0,
            val_count: 740,
            text_granularity: TextGranularity::Both,
            loss_terms: LossTerms::Both,
            tasks: Tasks::Both,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad("beta must be a finite non-negative number");
        }
        // lr = 0 is accepted: it freezes the model, which is a useful check.
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be a finite non-negative number");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.tau_init > 0.0) || !self.tau_init.is_finite() {
            return bad("tau_init must be positive");
        }
        if self.val_count == 0 {
            return bad("val_count must be positive: validation set would be empty");
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            text: self.text_granularity,
            terms: self.loss_terms,
            tasks: self.tasks,
        }
    }
}

/// Everything needed to continue training bit-exactly. Randomness is drawn
/// from a fresh stream per epoch, so `seed` and `epoch` fix the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: AlignmentModel,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub best_metric: f64,
    pub best_epoch: Option<usize>,
    pub best_params: ParamSet,
    pub seed: u64,
}

impl TrainState {
    pub fn new(encoder: EncoderConfig, cfg: &AlignmentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model = AlignmentModel::init(encoder)?;
        model
            .params
            .insert("log_tau", Array2::from_elem((1, 1), cfg.tau_init.ln()));
        let adam = Adam::new(AdamConfig::with_lr(cfg.lr), &model.params);
        Ok(Self {
            best_params: model.params.clone(),
            model,
            adam,
            epoch: 0,
            best_metric: f64::NEG_INFINITY,
            best_epoch: None,
            seed: cfg.seed,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// The selected model: best validation epoch, or the current parameters
    /// before any validation ran.
    pub fn best_model(&self) -> AlignmentModel {
        AlignmentModel {
            config: self.model.config.clone(),
            params: self.best_params.clone(),
        }
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut tensors = self.model.params.to_tensor_map();
        self.adam.to_tensors(&mut tensors);
        for (k, v) in self.best_params.iter() {
            tensors.insert(format!("best.{k}"), v.clone());
        }
        let mut f = TensorFile {
            meta: Vec::new(),
            tensors,
        };
        f.push_meta("kind", STATE_KIND);
        f.push_meta("format_version", 1);
        f.push_meta(
            "encoder_config",
            serde_json::to_string(&self.model.config).expect("config serialises"),
        );
        f.push_meta(
            "adam_config",
            serde_json::to_string(&self.adam.config).expect("config serialises"),
        );
        f.push_meta("adam_step", self.adam.step);
        f.push_meta("epoch", self.epoch);
        f.push_meta("best_metric", format!("{:?}", self.best_metric));
        f.push_meta(
            "best_epoch",
            self.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "none".into()),
        );
        f.push_meta("seed", self.seed);
        f.push_meta("rng", "chacha8, one stream per epoch");
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        if f.require_meta("kind")? != STATE_KIND {
            return Err(Error::Format("tensor file is not a training state".into()));
        }
        let parse = |key: &str| -> Result<&str> { f.require_meta(key) };
        let bad = |key: &str| Error::Format(format!("bad {key} in training state"));
        let config: EncoderConfig =
            serde_json::from_str(parse("encoder_config")?).map_err(|_| bad("encoder_config"))?;
        let adam_config: AdamConfig =
            serde_json::from_str(parse("adam_config")?).map_err(|_| bad("adam_config"))?;
        let adam_step: u64 = parse("adam_step")?.parse().map_err(|_| bad("adam_step"))?;
        let epoch: usize = parse("epoch")?.parse().map_err(|_| bad("epoch"))?;
        let best_metric: f64 = parse("best_metric")?.parse().map_err(|_| bad("best_metric"))?;
        let best_epoch = match parse("best_epoch")? {
            "none" => None,
            s => Some(s.parse().map_err(|_| bad("best_epoch"))?),
        };
        let seed: u64 = parse("seed")?.parse().map_err(|_| bad("seed"))?;

        let plain = f
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("adam.") && !k.starts_with("best."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let model = AlignmentModel::from_parts(config.clone(), ParamSet::from_tensor_map(plain))?;
        let best = f
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("best.").map(|n| (n.to_string(), v.clone())))
            .collect();
        let best_params = AlignmentModel::from_parts(config, ParamSet::from_tensor_map(best))?.params;
        let adam = Adam::from_tensors(adam_config, adam_step, &f.tensors);
        for name in model.params.names() {
            if adam.m.get(name).is_none() || adam.v.get(name).is_none() {
                return Err(Error::Format(format!("training state lacks optimizer moments for {name}")));
            }
        }
        Ok(Self {
            model,
            adam,
            epoch,
            best_metric,
            best_epoch,
            best_params,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_total: f64,
    pub tau: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub best_epoch: usize,
    pub best_val_top1: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    /// After validation; the state already counts the finished epoch.
    Epoch(&'a EpochRecord, &'a TrainState),
}

/// Splits `set` by sample into `(train, validation)`; the validation draw
/// depends only on `seed`.
pub fn split_validation(set: &TrialSet, val_count: usize, seed: u64) -> Result<(TrialSet, TrialSet)> {
    if val_count == 0 {
        return Err(Error::Config("validation set is empty".into()));
    }
    if val_count >= set.len() {
        return Err(Error::Config(format!(
            "{} samples cannot hold {val_count} validation samples and a training set",
            set.len()
        )));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut seeded_rng(seed, VAL_STREAM));
    let val: BTreeSet<usize> = order[..val_count].iter().copied().collect();
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, t) in set.trials.iter().enumerate() {
        if val.contains(&i) {
            va.push(t.clone());
        } else {
            tr.push(t.clone());
        }
    }
    Ok((set.with_trials(tr), set.with_trials(va)))
}

/// Top-1 and top-5 retrieval of validation trials against the images that
/// occur in the validation set.
pub fn validation_retrieval(model: &AlignmentModel, val: &TrialSet, emb: &CatalogEmbeddings) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let trials: Vec<&NeuralTrial> = val.trials.iter().collect();
    let (zv_hat, _) = model.embed(&trials)?;
    let gallery: Vec<i64> = trials
        .iter()
        .map(|t| t.image_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (templates, _, _) = emb.gather(&gallery)?;
    let ranked = rank_by_cosine(zv_hat.data.view(), &zv_hat.ids, templates.view(), &gallery)?;
    let rep = topk_accuracy(&ranked, &zv_hat.ids, Task::Retrieval)?;
    Ok((rep.top1, rep.top5))
}

fn check_shape(model: &EncoderConfig, set: &TrialSet, what: &str) -> Result<()> {
    if (model.channels, model.samples) != (set.channels(), set.samples) {
        return Err(Error::Config(format!(
            "{what} trials are {}×{}, model expects {}×{}",
            set.channels(),
            set.samples,
            model.channels,
            model.samples
        )));
    }
    Ok(())
}

/// Trains from `state.epoch` up to `cfg.epochs`, or for at most `max_epochs`
/// further epochs. `state` always holds the last consistent state, also when
/// an error is returned.
pub fn train(
    state: &mut TrainState,
    train: &TrialSet,
    val: &TrialSet,
    emb: &CatalogEmbeddings,
    cfg: &AlignmentConfig,
    max_epochs: Option<usize>,
    on_event: &mut dyn FnMut(TrainEvent) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    check_shape(&state.model.config, train, "training")?;
    check_shape(&state.model.config, val, "validation")?;
    if emb.dim() != state.model.config.embed_dim {
        return Err(Error::Config(format!(
            "providers give {}-d embeddings, model projects to {}",
            emb.dim(),
            state.model.config.embed_dim
        )));
    }
    let provider_hash = emb.fingerprint();
    let lcfg = cfg.loss_config();
    let enc_cfg = state.model.config.clone();
    let last = match max_epochs {
        Some(n) => cfg.epochs.min(state.epoch + n),
        None => cfg.epochs,
    };

    for epoch in state.epoch..last {
        let mut rng = seeded_rng(state.seed, EPOCH_STREAM + epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sum_total = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let trials: Vec<&NeuralTrial> = chunk.iter().map(|&i| &train.trials[i]).collect();
            let ids: Vec<i64> = trials.iter().map(|t| t.image_id).collect();
            let x = stack_trials(&trials, &enc_cfg)?;
            let (zv, zc, zt) = emb.gather(&ids)?;
            let p = &state.model.params;

            let mut g = Graph::new();
            let f = encoder_graph(&mut g, p, &enc_cfg, &x, Some(&mut rng));
            let zv_hat = projector_graph(&mut g, p, "visual", f);
            let zs_hat = projector_graph(&mut g, p, "semantic", f);
            let (zv, zc, zt) = (g.constant(zv), g.constant(zc), g.constant(zt));
            let log_tau = p.var(&mut g, "log_tau");
            let lv = loss_graph(&mut g, zv_hat, zs_hat, zv, zc, zt, log_tau, &lcfg);
            let breakdown = lv.breakdown(&g, &lcfg);
            let step = state.adam.step + 1;
            if !g.scalar(lv.total).is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step: step as usize,
                    detail: format!("loss parts {breakdown:?}"),
                });
            }
            let grads = g.backward(lv.total);
            let grads = g.param_grads(&grads);
            let bad: Vec<&str> = grads
                .iter()
                .filter(|(_, v)| v.iter().any(|x| !x.is_finite()))
                .map(|(k, _)| k.as_str())
                .collect();
            if !bad.is_empty() {
                return Err(Error::NonFinite {
                    epoch,
                    step: step as usize,
                    detail: format!("non-finite gradients in {bad:?}; loss parts {breakdown:?}"),
                });
            }
            state.adam.update(&mut state.model.params, &grads);
            sum_total += breakdown.total;
            n_batches += 1;
            let rec = StepRecord {
                step: state.adam.step,
                epoch,
                batch_size: trials.len(),
                loss: breakdown,
                tau: state.model.tau(),
            };
            on_event(TrainEvent::Step(&rec))?;
        }

        let (top1, top5) = validation_retrieval(&state.model, val, emb)?;
        if top1 >= state.best_metric {
            state.best_metric = top1;
            state.best_epoch = Some(epoch);
            state.best_params = state.model.params.clone();
        }
        state.epoch = epoch + 1;
        let rec = EpochRecord {
            epoch,
            step: state.adam.step,
            mean_total: sum_total / n_batches as f64,
            tau: state.model.tau(),
            val_top1: top1,
            val_top5: top5,
            best_epoch: state.best_epoch.expect("set above"),
            best_val_top1: state.best_metric,
        };
        on_event(TrainEvent::Epoch(&rec, state))?;
    }
    if emb.fingerprint() != provider_hash {
        return Err(Error::Protocol("provider embeddings changed during training".into()));
    }
    Ok(())
}

/// Fresh state for `set`: the encoder input shape is taken from the data.
pub fn initial_state(set: &TrialSet, encoder: &EncoderConfig, cfg: &AlignmentConfig) -> Result<TrainState> {
    TrainState::new(encoder.with_input(set.channels(), set.samples), cfg)
}

/// Validation split, fresh state and full training in one call. Every path
/// that trains a model from scratch goes through here.
pub fn fit(
    set: &TrialSet,
    encoder: &EncoderConfig,
    emb: &CatalogEmbeddings,
    cfg: &AlignmentConfig,
    on_event: &mut dyn FnMut(TrainEvent) -> Result<()>,
) -> Result<TrainState> {
    let (tr, va) = split_validation(set, cfg.val_count, cfg.seed)?;
    let mut state = initial_state(set, encoder, cfg)?;
    train(&mut state, &tr, &va, emb, cfg, None, on_event)?;
    Ok(state)
}

/// Gradient check of the overall objective through encoder, projectors and
/// `log_tau` on a fixed batch (dropout off).
pub fn finite_diff_check(
    params: &ParamSet,
    encoder: &EncoderConfig,
    x: &Array2<f64>,
    targets: (&Array2<f64>, &Array2<f64>, &Array2<f64>),
    cfg: &LossConfig,
    probes: usize,
    step: f64,
    seed: u64,
) -> GradCheckReport {
    check_gradients(params, probes, step, seed, |g, p| {
        let f = encoder_graph(g, p, encoder, x, None);
        let zv_hat = projector_graph(g, p, "visual", f);
        let zs_hat = projector_graph(g, p, "semantic", f);
        let zv = g.constant(targets.0.clone());
        let zc = g.constant(targets.1.clone());
        let zt = g.constant(targets.2.clone());
        let log_tau = p.var(g, "log_tau");
        loss_graph(g, zv_hat, zs_hat, zv, zc, zt, log_tau, cfg).total
    })
}

/// Reduced encoder used by the reference gradient check.
pub fn reference_encoder(seed: u64) -> EncoderConfig {
    EncoderConfig {
        channels: 4,
        samples: 20,
        temporal_kernel: 3,
        temporal_filters: 3,
        spatial_filters: 4,
        pool: 3,
        attention: true,
        feature_dim: 6,
        embed_dim: 5,
        dropout_rate: 0.5,
        seed,
    }
}

/// Reference configuration: `B = 4`, reduced dimensions, random inputs and
/// targets, default loss weights.
pub fn reference_grad_check(seed: u64, probes: usize, step: f64) -> Result<GradCheckReport> {
    let enc = reference_encoder(seed);
    let params = crate::encoder::init_params(&enc)?;
    let b = 4;
    let mut rng = seeded_rng(seed, 7);
    let mut normal = |r: usize, c: usize| {
        Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(&mut rng))
    };
    let x = normal(b * enc.channels, enc.samples);
    let zv = normal(b, enc.embed_dim);
    let zc = normal(b, enc.embed_dim);
    let zt = normal(b, enc.embed_dim);
    Ok(finite_diff_check(
        &params,
        &enc,
        &x,
        (&zv, &zc, &zt),
        &LossConfig::new(0.5, 2.0),
        probes,
        step,
        seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::embed::oracle_providers;
    use crate::gradcheck::FD_STEP;

    fn small_encoder() -> EncoderConfig {
        EncoderConfig {
            temporal_kernel: 5,
            temporal_filters: 4,
            spatial_filters: 4,
            pool: 8,
            attention: false,
            feature_dim: 16,
            embed_dim: 16,
            dropout_rate: 0.0,
            ..EncoderConfig::default()
        }
    }

    fn setup() -> (TrialSet, CatalogEmbeddings) {
        let spec = SyntheticSpec {
            n_categories: 4,
            images_per_category: 4,
            repetitions: 2,
            channels: 6,
            samples: 40,
            embed_dim: 16,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let emb = CatalogEmbeddings::build(&ds.train.catalog, &oracle_providers(&ds)).unwrap();
        (ds.train, emb)
    }

    fn quick(seed: u64) -> AlignmentConfig {
        AlignmentConfig {
            epochs: 3,
            batch_size: 8,
            val_count: 8,
            lr: 1e-2,
            seed,
            ..AlignmentConfig::default()
        }
    }

    fn run(set: &TrialSet, emb: &CatalogEmbeddings, cfg: &AlignmentConfig) -> (TrainState, Vec<LogRecord>) {
        let mut log = Vec::new();
        let state = fit(set, &small_encoder(), emb, cfg, &mut |e| {
            log.push(match e {
                TrainEvent::Step(r) => LogRecord::Step(r.clone()),
                TrainEvent::Epoch(r, _) => LogRecord::Epoch(r.clone()),
            });
            Ok(())
        })
        .unwrap();
        (state, log)
    }

    #[test]
    fn config_validation() {
        assert!(AlignmentConfig::default().validate().is_ok());
        for c in [
            AlignmentConfig { alpha: 1.5, ..Default::default() },
            AlignmentConfig { beta: -1.0, ..Default::default() },
            AlignmentConfig { epochs: 0, ..Default::default() },
            AlignmentConfig { tau_init: 0.0, ..Default::default() },
            AlignmentConfig { val_count: 0, ..Default::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn validation_split_is_disjoint_and_seeded() {
        let (set, _) = setup();
        let (tr, va) = split_validation(&set, 5, 3).unwrap();
        assert_eq!(va.len(), 5);
        assert_eq!(tr.len() + va.len(), set.len());
        let (_, va2) = split_validation(&set, 5, 3).unwrap();
        assert_eq!(va.trials, va2.trials);
        assert!(split_validation(&set, 0, 0).is_err());
        assert!(split_validation(&set, set.len(), 0).is_err());
    }

    #[test]
    fn same_seed_gives_identical_history() {
        let (set, emb) = setup();
        let (a, la) = run(&set, &emb, &quick(5));
        let (b, lb) = run(&set, &emb, &quick(5));
        assert_eq!(la, lb);
        assert_eq!(a, b);
        let (_, lc) = run(&set, &emb, &quick(6));
        assert_ne!(la, lc);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (set, emb) = setup();
        let cfg = AlignmentConfig { lr: 0.0, ..quick(1) };
        let init = initial_state(&set, &small_encoder(), &cfg).unwrap();
        let (state, _) = run(&set, &emb, &cfg);
        assert_eq!(state.model.params, init.model.params);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (set, emb) = setup();
        let cfg = quick(2);
        let (tr, va) = split_validation(&set, cfg.val_count, cfg.seed).unwrap();
        let (full, _) = run(&set, &emb, &cfg);

        let mut s = initial_state(&set, &small_encoder(), &cfg).unwrap();
        train(&mut s, &tr, &va, &emb, &cfg, Some(1), &mut |_| Ok(())).unwrap();
        assert_eq!(s.epoch, 1);
        let bytes = s.to_tensor_file().to_bytes().unwrap();
        let mut resumed = TrainState::from_tensor_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        train(&mut resumed, &tr, &va, &emb, &cfg, None, &mut |_| Ok(())).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn step_records_recompute_total() {
        let (set, emb) = setup();
        let (_, log) = run(&set, &emb, &quick(0));
        let lcfg = quick(0).loss_config();
        let mut steps = 0;
        for r in &log {
            if let LogRecord::Step(s) = r {
                assert_eq!(s.loss.clip_t, (s.loss.clip_t1 + s.loss.clip_t2) / 2.0);
                assert_eq!(s.loss.total, lcfg.total(&s.loss));
                steps += 1;
            }
        }
        // 32 samples − 8 validation, batches of 8.
        assert_eq!(steps, 3 * 3);
    }

    #[test]
    fn nan_input_aborts_with_diagnostic() {
        let (mut set, emb) = setup();
        set.trials[0].signal[[0, 0]] = f32::NAN;
        let cfg = AlignmentConfig { val_count: 1, ..quick(0) };
        let (tr, va) = (set.with_trials(set.trials.clone()), set.with_trials(set.trials[1..2].to_vec()));
        let mut s = initial_state(&set, &small_encoder(), &cfg).unwrap();
        let err = train(&mut s, &tr, &va, &emb, &cfg, None, &mut |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFinite { epoch: 0, .. }), "{err}");
        // Batches before the bad one were applied; the bad one was not.
        assert!(s.model.params.all_finite());
    }

    #[test]
    fn reference_gradient_check_passes() {
        let rep = reference_grad_check(0, 6, FD_STEP).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        assert!(rep.per_tensor.contains_key("log_tau"));
        assert!(rep.per_tensor.contains_key("encoder.attn.query.weight"));
        assert_eq!(rep, reference_grad_check(0, 6, FD_STEP).unwrap());
    }

    #[test]
    fn zero_loss_region_has_zero_gradient() {
        // MSE-only with targets equal to the current outputs.
        let enc = reference_encoder(1);
        let params = crate::encoder::init_params(&enc).unwrap();
        let x = Array2::from_shape_fn((4 * enc.channels, enc.samples), |(i, j)| ((i * 7 + j) % 5) as f64 - 2.0);
        let model = AlignmentModel { config: enc.clone(), params: params.clone() };
        let mut g = Graph::new();
        let f = encoder_graph(&mut g, &params, &enc, &x, None);
        let f = g.value(f).clone();
        let zv = model.project_visual(&f).unwrap();
        let zs = model.project_semantic(&f).unwrap();
        let cfg = LossConfig {
            terms: LossTerms::MseOnly,
            ..LossConfig::new(0.5, 2.0)
        };
        let rep = check_gradients(&params, 4, FD_STEP, 0, |g, p| {
            let f = encoder_graph(g, p, &enc, &x, None);
            let a = projector_graph(g, p, "visual", f);
            let b = projector_graph(g, p, "semantic", f);
            let (v, c, t) = (g.constant(zv.clone()), g.constant(zs.clone()), g.constant(zs.clone()));
            let lt = p.var(g, "log_tau");
            loss_graph(g, a, b, v, c, t, lt, &cfg).total
        });
        let mut g = Graph::new();
        let f = encoder_graph(&mut g, &params, &enc, &x, None);
        let a = projector_graph(&mut g, &params, "visual", f);
        let b = projector_graph(&mut g, &params, "semantic", f);
        let (v, c, t) = (g.constant(zv.clone()), g.constant(zs.clone()), g.constant(zs));
        let lt = params.var(&mut g, "log_tau");
        let total = loss_graph(&mut g, a, b, v, c, t, lt, &cfg).total;
        assert_eq!(g.scalar(total), 0.0);
        let grads = g.backward(total);
        for (_, gr) in g.param_grads(&grads) {
            assert!(gr.iter().all(|v| v.abs() < 1e-12));
        }
        assert!(rep.checked > 0);
    }
}
