//! The trainable neural pathway: an M/EEG encoder and two projection heads.
//!
//! Encoder (per trial, `C × T` input):
//!
//! 1. temporal convolution along `T` with `F` filters of length `K`,
//! 2. spatial convolution across all `C` channels to `S` maps,
//! 3. GELU, mean pooling over non-overlapping windows of `pool` samples,
//! 4. optionally one self-attention block over the pooled time tokens
//!    (residual connection, layer norm),
//! 5. flatten, dropout, linear to `feature_dim`, GELU.
//!
//! Steps 1 and 2 are both linear, so they are evaluated as a single
//! convolution whose kernel is the composition of the two weight tensors.
//!
//! Projector: `h = f·W1 + b1`, `out = LN(h + GELU(h)·W2 + b2)·γ + β`.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::NeuralTrial;
use crate::embed::{EmbeddingBatch, Modality};
use crate::error::{Error, Result};
use crate::params::{seeded_rng, xavier, ParamSet, TensorFile};

pub const TAU_INIT: f64 = 0.07;
const LN_EPS: f64 = 1e-5;
const CHECKPOINT_KIND: &str = "alignment-model";
/// Trials per forward chunk in inference.
const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub channels: usize,
    pub samples: usize,
    pub temporal_kernel: usize,
    pub temporal_filters: usize,
    pub spatial_filters: usize,
    pub pool: usize,
    pub attention: bool,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 63,
            samples: 250,
            temporal_kernel: 25,
            temporal_filters: 40,
            spatial_filters: 40,
            pool: 10,
            attention: true,
            feature_dim: 256,
            embed_dim: 1024,
            dropout_rate: 0.5,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("samples", self.samples),
            ("temporal_kernel", self.temporal_kernel),
            ("temporal_filters", self.temporal_filters),
            ("spatial_filters", self.spatial_filters),
            ("pool", self.pool),
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model {name} must be positive")));
            }
        }
        if self.temporal_kernel > self.samples {
            return Err(Error::Config(format!(
                "temporal kernel {} longer than {} samples",
                self.temporal_kernel, self.samples
            )));
        }
        if self.conv_len() < self.pool {
            return Err(Error::Config(format!(
                "pool {} exceeds the {} convolution outputs",
                self.pool,
                self.conv_len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Samples after the valid temporal convolution.
    pub fn conv_len(&self) -> usize {
        self.samples + 1 - self.temporal_kernel.min(self.samples)
    }

    /// Pooled time tokens.
    pub fn tokens(&self) -> usize {
        self.conv_len() / self.pool
    }

    pub fn flat_dim(&self) -> usize {
        self.tokens() * self.spatial_filters
    }

    /// Same architecture for a different input shape.
    pub fn with_input(&self, channels: usize, samples: usize) -> EncoderConfig {
        let mut c = self.clone();
        c.channels = channels;
        c.samples = samples;
        c.temporal_kernel = c.temporal_kernel.min(samples);
        c.pool = c.pool.min(c.conv_len()).max(1);
        c
    }
}

fn linear(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize) {
    p.insert(format!("{name}.weight"), xavier(rng, i, o));
    p.insert(format!("{name}.bias"), Array2::zeros((1, o)));
}

fn norm(p: &mut ParamSet, name: &str, n: usize) {
    p.insert(format!("{name}.weight"), Array2::ones((1, n)));
    p.insert(format!("{name}.bias"), Array2::zeros((1, n)));
}

fn init_projector(p: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, f: usize, d: usize) {
    linear(p, rng, &format!("{prefix}.fc1"), f, d);
    linear(p, rng, &format!("{prefix}.fc2"), d, d);
    norm(p, &format!("{prefix}.norm"), d);
}

/// Deterministic initialisation from `cfg.seed`; `τ` starts at 0.07.
pub fn init_params(cfg: &EncoderConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed, 0);
    let mut p = ParamSet::new();
    let (k, f, s, c) = (
        cfg.temporal_kernel,
        cfg.temporal_filters,
        cfg.spatial_filters,
        cfg.channels,
    );
    p.insert("encoder.temporal.weight", xavier(&mut rng, k, f));
    p.insert("encoder.spatial.weight", xavier(&mut rng, c * f, s));
    p.insert("encoder.spatial.bias", Array2::zeros((1, s)));
    if cfg.attention {
        for m in ["query", "key", "value", "out"] {
            p.insert(format!("encoder.attn.{m}.weight"), xavier(&mut rng, s, s));
        }
        norm(&mut p, "encoder.attn.norm", s);
    }
    linear(&mut p, &mut rng, "encoder.fc", cfg.flat_dim(), cfg.feature_dim);
    init_projector(&mut p, &mut rng, "visual", cfg.feature_dim, cfg.embed_dim);
    init_projector(&mut p, &mut rng, "semantic", cfg.feature_dim, cfg.embed_dim);
    p.insert("log_tau", Array2::from_elem((1, 1), TAU_INIT.ln()));
    Ok(p)
}

/// Stacks trials into the `(B·C) × T` layout of [`Graph::conv_valid`].
pub fn stack_trials(trials: &[&NeuralTrial], cfg: &EncoderConfig) -> Result<Array2<f64>> {
    let (c, t) = (cfg.channels, cfg.samples);
    let mut x = Array2::zeros((trials.len() * c, t));
    for (b, tr) in trials.iter().enumerate() {
        if tr.signal.dim() != (c, t) {
            return Err(Error::Config(format!(
                "trial has shape {:?}, model expects ({c}, {t})",
                tr.signal.dim()
            )));
        }
        x.slice_mut(ndarray::s![b * c..(b + 1) * c, ..])
            .assign(&tr.signal.mapv(|v| v as f64));
    }
    Ok(x)
}

fn affine(g: &mut Graph, p: &ParamSet, name: &str, x: Var) -> Var {
    let w = p.var(g, &format!("{name}.weight"));
    let b = p.var(g, &format!("{name}.bias"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn layer_norm_affine(g: &mut Graph, p: &ParamSet, name: &str, x: Var) -> Var {
    let y = g.layer_norm(x, LN_EPS);
    let w = p.var(g, &format!("{name}.weight"));
    let b = p.var(g, &format!("{name}.bias"));
    let y = g.mul_row(y, w);
    g.add_row(y, b)
}

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask = Array2::from_shape_simple_fn(g.shape(x), || {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            });
            let m = g.constant(mask);
            g.mul(x, m)
        }
        _ => x,
    }
}

/// Encoder forward pass on stacked input `x`; returns `B × feature_dim`.
/// Dropout is active iff `train_rng` is given.
pub fn encoder_graph(
    g: &mut Graph,
    p: &ParamSet,
    cfg: &EncoderConfig,
    x: &Array2<f64>,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Var {
    let (c, k, f, s) = (
        cfg.channels,
        cfg.temporal_kernel,
        cfg.temporal_filters,
        cfg.spatial_filters,
    );
    let b = x.nrows() / c;
    let (t1, t2) = (cfg.conv_len(), cfg.tokens());

    // Composite kernel: block c of rows is W_t · W_s[c·F..(c+1)·F, :].
    let wt = p.var(g, "encoder.temporal.weight");
    let tiled = g.gather(
        wt,
        c * k,
        f,
        (0..c).flat_map(|_| 0..k * f).collect(),
    );
    let ws = p.var(g, "encoder.spatial.weight");
    let kernel = g.batched_matmul(tiled, ws, c);

    let xv = g.constant(x.clone());
    let h = g.conv_valid(xv, c, kernel);
    let bias = p.var(g, "encoder.spatial.bias");
    let h = g.add_row(h, bias);
    let h = g.gelu(h);
    let groups = (0..b)
        .flat_map(|bi| (0..t2).map(move |j| (bi * t1 + j * cfg.pool, cfg.pool)))
        .collect();
    let mut h = g.row_group_mean(h, groups);

    if cfg.attention {
        let wq = p.var(g, "encoder.attn.query.weight");
        let wk = p.var(g, "encoder.attn.key.weight");
        let wv = p.var(g, "encoder.attn.value.weight");
        let wo = p.var(g, "encoder.attn.out.weight");
        let q = g.matmul(h, wq);
        let kk = g.matmul(h, wk);
        let v = g.matmul(h, wv);
        let scores = g.batched_matmul_nt(q, kk, b);
        let scores = g.scale(scores, 1.0 / (s as f64).sqrt());
        let attn = g.softmax(scores);
        let ctx = g.batched_matmul(attn, v, b);
        let out = g.matmul(ctx, wo);
        let res = g.add(h, out);
        h = layer_norm_affine(g, p, "encoder.attn.norm", res);
    }

    let flat = g.reshape(h, b, t2 * s);
    let flat = dropout(g, flat, cfg.dropout_rate, train_rng);
    let out = affine(g, p, "encoder.fc", flat);
    g.gelu(out)
}

/// Projection head `prefix` (`visual` or `semantic`) applied to features.
pub fn projector_graph(g: &mut Graph, p: &ParamSet, prefix: &str, features: Var) -> Var {
    let h = affine(g, p, &format!("{prefix}.fc1"), features);
    let a = g.gelu(h);
    let a = affine(g, p, &format!("{prefix}.fc2"), a);
    let r = g.add(h, a);
    layer_norm_affine(g, p, &format!("{prefix}.norm"), r)
}

/// Trained or initialised alignment model.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl AlignmentModel {
    pub fn init(config: EncoderConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(Self { config, params })
    }

    pub fn tau(&self) -> f64 {
        self.params.tensor("log_tau")[[0, 0]].exp()
    }

    /// `f_b` in eval mode: `B × feature_dim`.
    pub fn encode(&self, trials: &[&NeuralTrial]) -> Result<Array2<f64>> {
        encode_neural(&self.params, &self.config, trials)
    }

    pub fn project_visual(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        project(&self.params, "visual", features)
    }

    pub fn project_semantic(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        project(&self.params, "semantic", features)
    }

    /// Neural-visual and neural-semantic embeddings of `trials`.
    pub fn embed(&self, trials: &[&NeuralTrial]) -> Result<(EmbeddingBatch, EmbeddingBatch)> {
        let f = self.encode(trials)?;
        let ids: Vec<i64> = trials.iter().map(|t| t.image_id).collect();
        let zv = EmbeddingBatch::new(self.project_visual(&f)?, Modality::NeuralVisual, ids.clone())?;
        let zs = EmbeddingBatch::new(self.project_semantic(&f)?, Modality::NeuralSemantic, ids)?;
        Ok((zv, zs))
    }

    pub fn fingerprint(&self) -> String {
        let cfg = serde_json::to_string(&self.config).expect("config serialises");
        crate::params::sha256_hex(format!("{cfg}\n{}", self.params.fingerprint()).as_bytes())
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile {
            meta: Vec::new(),
            tensors: self.params.to_tensor_map(),
        };
        f.push_meta("kind", CHECKPOINT_KIND);
        f.push_meta("format_version", 1);
        f.push_meta("seed", self.config.seed);
        f.push_meta("encoder_config", serde_json::to_string(&self.config).expect("config serialises"));
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        if f.require_meta("kind")? != CHECKPOINT_KIND {
            return Err(Error::Format("tensor file is not an alignment model".into()));
        }
        let config: EncoderConfig = serde_json::from_str(f.require_meta("encoder_config")?)
            .map_err(|e| Error::Format(format!("bad encoder config in checkpoint: {e}")))?;
        let params = ParamSet::from_tensor_map(
            f.tensors
                .iter()
                .filter(|(k, _)| !k.starts_with("adam.") && !k.starts_with("best."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        );
        Self::from_parts(config, params)
    }

    /// Pairs `params` with `config` after checking every expected tensor
    /// is present with the right shape.
    pub fn from_parts(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        let expected = init_params(&config)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(v) if v.dim() == t.dim() => {}
                _ => return Err(Error::Format(format!("checkpoint lacks or misshapes {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}

/// `f_b` in eval mode. Row `i` depends only on `trials[i]`.
pub fn encode_neural(p: &ParamSet, cfg: &EncoderConfig, trials: &[&NeuralTrial]) -> Result<Array2<f64>> {
    if trials.is_empty() {
        return Err(Error::Shape("cannot encode an empty batch".into()));
    }
    let mut out = Array2::zeros((trials.len(), cfg.feature_dim));
    for (ci, chunk) in trials.chunks(EVAL_CHUNK).enumerate() {
        let x = stack_trials(chunk, cfg)?;
        let mut g = Graph::new();
        let f = encoder_graph(&mut g, p, cfg, &x, None);
        out.slice_mut(ndarray::s![ci * EVAL_CHUNK..ci * EVAL_CHUNK + chunk.len(), ..])
            .assign(g.value(f));
    }
    Ok(out)
}

fn project(p: &ParamSet, prefix: &str, features: &Array2<f64>) -> Result<Array2<f64>> {
    let want = p.tensor(&format!("{prefix}.fc1.weight")).nrows();
    if features.ncols() != want {
        return Err(Error::Shape(format!(
            "features have width {}, projector expects {want}",
            features.ncols()
        )));
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let z = projector_graph(&mut g, p, prefix, f);
    Ok(g.value(z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn tiny(attention: bool) -> EncoderConfig {
        EncoderConfig {
            channels: 3,
            samples: 12,
            temporal_kernel: 3,
            temporal_filters: 2,
            spatial_filters: 4,
            pool: 2,
            attention,
            feature_dim: 6,
            embed_dim: 5,
            dropout_rate: 0.0,
            seed: 1,
        }
    }

    fn random_trials(cfg: &EncoderConfig, n: usize, seed: u64) -> Vec<NeuralTrial> {
        let mut rng = seeded_rng(seed, 9);
        (0..n)
            .map(|i| NeuralTrial {
                signal: Array2::from_shape_simple_fn((cfg.channels, cfg.samples), || {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v as f32
                }),
                subject_id: "s".into(),
                category_id: 0,
                image_id: i as i64,
                repetition: 0,
                sample_rate_hz: 250.0,
                start_ms: 0.0,
            })
            .collect()
    }

    #[test]
    fn tau_starts_at_0_07() {
        let m = AlignmentModel::init(tiny(true)).unwrap();
        assert!((m.tau() - 0.07).abs() < 1e-12);
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(&tiny(true)).unwrap();
        assert_eq!(a, init_params(&tiny(true)).unwrap());
        let other = EncoderConfig { seed: 2, ..tiny(true) };
        assert_ne!(a, init_params(&other).unwrap());
    }

    #[test]
    fn batch_rows_are_independent() {
        for attention in [false, true] {
            let cfg = tiny(attention);
            let m = AlignmentModel::init(cfg.clone()).unwrap();
            let trials = random_trials(&cfg, 4, 3);
            let refs: Vec<&NeuralTrial> = trials.iter().collect();
            let full = m.encode(&refs).unwrap();
            assert_eq!(full.dim(), (4, 6));
            let perm = [2, 0, 3, 1];
            let permuted: Vec<&NeuralTrial> = perm.iter().map(|&i| &trials[i]).collect();
            let pf = m.encode(&permuted).unwrap();
            for (row, &i) in perm.iter().enumerate() {
                assert_eq!(pf.row(row), full.row(i));
            }
            let single = m.encode(&refs[1..2]).unwrap();
            for (a, b) in single.row(0).iter().zip(full.row(1).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let cfg = tiny(true);
        let m = AlignmentModel::init(cfg.clone()).unwrap();
        let mut t = random_trials(&cfg, 1, 0);
        t[0].signal = Array2::zeros((3, 11));
        assert!(matches!(m.encode(&[&t[0]]), Err(Error::Config(_))));
    }

    #[test]
    fn equal_heads_give_equal_embeddings() {
        let cfg = tiny(true);
        let mut m = AlignmentModel::init(cfg.clone()).unwrap();
        for name in ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "norm.weight", "norm.bias"] {
            let v = m.params.tensor(&format!("visual.{name}")).clone();
            m.params.insert(format!("semantic.{name}"), v);
        }
        let trials = random_trials(&cfg, 3, 5);
        let refs: Vec<&NeuralTrial> = trials.iter().collect();
        let (zv, zs) = m.embed(&refs).unwrap();
        assert_eq!(zv.data, zs.data);
    }

    #[test]
    fn zero_features_through_zero_bias_head_give_zero() {
        let m = AlignmentModel::init(tiny(false)).unwrap();
        let z = m.project_visual(&Array2::zeros((2, 6))).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn large_inputs_stay_finite() {
        let cfg = tiny(true);
        let m = AlignmentModel::init(cfg.clone()).unwrap();
        let mut trials = random_trials(&cfg, 2, 7);
        trials[0].signal.mapv_inplace(|v| v.signum() * 1000.0);
        let refs: Vec<&NeuralTrial> = trials.iter().collect();
        let (zv, zs) = m.embed(&refs).unwrap();
        assert!(zv.data.iter().chain(zs.data.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = AlignmentModel::init(tiny(true)).unwrap();
        let f = m.to_tensor_file();
        let back = AlignmentModel::from_tensor_file(&TensorFile::from_bytes(&f.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.fingerprint(), m.fingerprint());
    }
}
