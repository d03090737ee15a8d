//! Learnable-query transformer block mapping neural-semantic vectors to
//! prompt-token and pooled-prompt embeddings.
//!
//! `z_q' = SelfAttention(z_q)`, `z_q'' = softmax(Q·Kᵀ/√d)·V` with `Q` from
//! `z_q'` and `K`, `V` from the input tokens, then a position-wise FFN and
//! two linear heads. The input vector of width `d` is read as
//! `L = d / d_model` tokens of width `d_model`. No positional encodings.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::fit::{fit_params, BridgeTrainConfig, FitReport};
use crate::alignment::loss::mse_graph;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{seeded_rng, xavier, ParamSet, TensorFile};

const KIND: &str = "qformer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QFormerConfig {
    pub n_queries: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Width of the neural-semantic input.
    pub input_dim: usize,
    pub prompt_dim: usize,
    pub pool_dim: usize,
    pub seed: u64,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            n_queries: 77,
            d_model: 1024,
            n_heads: 8,
            ffn_dim: 2048,
            input_dim: 1024,
            prompt_dim: 2048,
            pool_dim: 1280,
            seed: 0,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_queries", self.n_queries),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("input_dim", self.input_dim),
            ("prompt_dim", self.prompt_dim),
            ("pool_dim", self.pool_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("qformer {name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "qformer d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.input_dim % self.d_model != 0 {
            return Err(Error::Config(format!(
                "input width {} is not a multiple of d_model {}",
                self.input_dim, self.d_model
            )));
        }
        Ok(())
    }

    /// Input tokens per sample.
    pub fn tokens(&self) -> usize {
        self.input_dim / self.d_model
    }
}

pub fn init_qformer_params(cfg: &QFormerConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed, 0);
    let (q, d) = (cfg.n_queries, cfg.d_model);
    let mut p = ParamSet::new();
    p.insert("qformer.queries", xavier(&mut rng, q, d));
    for m in ["query", "key", "value", "out"] {
        p.insert(format!("qformer.self.{m}.weight"), xavier(&mut rng, d, d));
    }
    for m in ["query", "key", "value"] {
        p.insert(format!("qformer.cross.{m}.weight"), xavier(&mut rng, d, d));
    }
    let mut linear = |p: &mut ParamSet, name: &str, i: usize, o: usize| {
        p.insert(format!("{name}.weight"), xavier(&mut rng, i, o));
        p.insert(format!("{name}.bias"), Array2::zeros((1, o)));
    };
    linear(&mut p, "qformer.ffn.fc1", d, cfg.ffn_dim);
    linear(&mut p, "qformer.ffn.fc2", cfg.ffn_dim, d);
    linear(&mut p, "qformer.prompt_head", d, cfg.prompt_dim);
    linear(&mut p, "qformer.pooled_head", d, cfg.pool_dim);
    Ok(p)
}

fn affine(g: &mut Graph, p: &ParamSet, name: &str, x: Var) -> Var {
    let w = p.var(g, &format!("{name}.weight"));
    let b = p.var(g, &format!("{name}.bias"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Output and attention weights of one attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub output: Var,
    pub weights: Var,
}

/// Multi-head self-attention over the `n × d_model` rows of `zq`.
pub fn self_attention_graph(g: &mut Graph, p: &ParamSet, cfg: &QFormerConfig, zq: Var) -> AttentionVars {
    let (n, d) = g.shape(zq);
    let h = cfg.n_heads;
    let dh = d / h;
    let proj = |g: &mut Graph, m: &str| {
        let w = p.var(g, &format!("qformer.self.{m}.weight"));
        g.matmul(zq, w)
    };
    let (q, k, v) = (proj(g, "query"), proj(g, "key"), proj(g, "value"));
    // Head-major blocks: block `hd` row `i` is columns `hd·dh..(hd+1)·dh` of row `i`.
    let split: Vec<usize> = (0..h)
        .flat_map(|hd| (0..n).flat_map(move |i| (0..dh).map(move |j| i * d + hd * dh + j)))
        .collect();
    let qh = g.gather(q, h * n, dh, split.clone());
    let kh = g.gather(k, h * n, dh, split.clone());
    let vh = g.gather(v, h * n, dh, split);
    let s = g.batched_matmul_nt(qh, kh, h);
    let s = g.scale(s, 1.0 / (dh as f64).sqrt());
    let a = g.softmax(s);
    let ctx = g.batched_matmul(a, vh, h);
    let merge: Vec<usize> = (0..n)
        .flat_map(|i| (0..h).flat_map(move |hd| (0..dh).map(move |j| (hd * n + i) * dh + j)))
        .collect();
    let ctx = g.gather(ctx, n, d, merge);
    let wo = p.var(g, "qformer.self.out.weight");
    AttentionVars {
        output: g.matmul(ctx, wo),
        weights: a,
    }
}

/// Single-head cross-attention of the `n` query rows against each of `b`
/// samples' token blocks (`(b·L) × d_model`), scaled by `1/√d_model`.
/// Output is `(b·n) × d_model`, weights `(b·n) × L`.
pub fn cross_attention_graph(
    g: &mut Graph,
    p: &ParamSet,
    cfg: &QFormerConfig,
    zq1: Var,
    tokens: Var,
    b: usize,
) -> AttentionVars {
    let (n, d) = g.shape(zq1);
    let wq = p.var(g, "qformer.cross.query.weight");
    let q = g.matmul(zq1, wq);
    let q = g.gather(q, b * n, d, (0..b).flat_map(|_| 0..n * d).collect());
    let wk = p.var(g, "qformer.cross.key.weight");
    let wv = p.var(g, "qformer.cross.value.weight");
    let k = g.matmul(tokens, wk);
    let v = g.matmul(tokens, wv);
    let s = g.batched_matmul_nt(q, k, b);
    let s = g.scale(s, 1.0 / (cfg.d_model as f64).sqrt());
    let a = g.softmax(s);
    AttentionVars {
        output: g.batched_matmul(a, v, b),
        weights: a,
    }
}

/// `x + fc2(GELU(fc1(x)))`, row-wise.
pub fn ffn_graph(g: &mut Graph, p: &ParamSet, x: Var) -> Var {
    let h = affine(g, p, "qformer.ffn.fc1", x);
    let h = g.gelu(h);
    let y = affine(g, p, "qformer.ffn.fc2", h);
    g.add(x, y)
}

#[derive(Debug, Clone, Copy)]
pub struct QFormerVars {
    /// `(b·n_queries) × prompt_dim`
    pub prompt: Var,
    /// `b × pool_dim`
    pub pooled: Var,
}

/// Full forward pass for a `b × input_dim` batch.
pub fn qformer_graph(g: &mut Graph, p: &ParamSet, cfg: &QFormerConfig, zs_hat: Var) -> QFormerVars {
    let b = g.shape(zs_hat).0;
    let n = cfg.n_queries;
    let zq = p.var(g, "qformer.queries");
    let zq1 = self_attention_graph(g, p, cfg, zq).output;
    let tokens = g.reshape(zs_hat, b * cfg.tokens(), cfg.d_model);
    let zq2 = cross_attention_graph(g, p, cfg, zq1, tokens, b).output;
    let h = ffn_graph(g, p, zq2);
    let prompt = affine(g, p, "qformer.prompt_head", h);
    let pooled = g.row_group_mean(h, (0..b).map(|i| (i * n, n)).collect());
    let pooled = affine(g, p, "qformer.pooled_head", pooled);
    QFormerVars { prompt, pooled }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: Array2<f64>,
    pub weights: Array2<f64>,
}

fn check_params(p: &ParamSet, cfg: &QFormerConfig) -> Result<()> {
    let expected = init_qformer_params(cfg)?;
    for (name, t) in expected.iter() {
        match p.get(name) {
            Some(v) if v.dim() == t.dim() => {}
            _ => return Err(Error::Shape(format!("qformer parameter {name} missing or misshapen"))),
        }
    }
    Ok(())
}

fn check_input(zs_hat: &Array2<f64>, cfg: &QFormerConfig) -> Result<()> {
    if zs_hat.ncols() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "input has width {}, qformer expects {}",
            zs_hat.ncols(),
            cfg.input_dim
        )));
    }
    if zs_hat.nrows() == 0 {
        return Err(Error::Shape("empty input batch".into()));
    }
    Ok(())
}

/// Self-attention over `zq` (`n × d_model`).
pub fn qformer_self_attention(p: &ParamSet, cfg: &QFormerConfig, zq: &Array2<f64>) -> Result<AttentionOutput> {
    check_params(p, cfg)?;
    if zq.ncols() != cfg.d_model || zq.nrows() == 0 {
        return Err(Error::Shape(format!("query tokens {:?} do not have width {}", zq.dim(), cfg.d_model)));
    }
    let mut g = Graph::new();
    let x = g.constant(zq.clone());
    let a = self_attention_graph(&mut g, p, cfg, x);
    Ok(AttentionOutput {
        output: g.value(a.output).clone(),
        weights: g.value(a.weights).clone(),
    })
}

/// Cross-attention of `zq1` against the tokens of every row of `zs_hat`.
pub fn qformer_cross_attention(
    p: &ParamSet,
    cfg: &QFormerConfig,
    zq1: &Array2<f64>,
    zs_hat: &Array2<f64>,
) -> Result<AttentionOutput> {
    check_params(p, cfg)?;
    check_input(zs_hat, cfg)?;
    if zq1.ncols() != cfg.d_model {
        return Err(Error::Shape(format!("query tokens have width {}, expected {}", zq1.ncols(), cfg.d_model)));
    }
    let b = zs_hat.nrows();
    let mut g = Graph::new();
    let q = g.constant(zq1.clone());
    let x = g.constant(zs_hat.clone());
    let tokens = g.reshape(x, b * cfg.tokens(), cfg.d_model);
    let a = cross_attention_graph(&mut g, p, cfg, q, tokens, b);
    Ok(AttentionOutput {
        output: g.value(a.output).clone(),
        weights: g.value(a.weights).clone(),
    })
}

/// FFN and prompt head on `zq2` rows.
pub fn qformer_ffn(p: &ParamSet, cfg: &QFormerConfig, zq2: &Array2<f64>) -> Result<Array2<f64>> {
    check_params(p, cfg)?;
    if zq2.ncols() != cfg.d_model {
        return Err(Error::Shape(format!("tokens have width {}, expected {}", zq2.ncols(), cfg.d_model)));
    }
    let mut g = Graph::new();
    let x = g.constant(zq2.clone());
    let h = ffn_graph(&mut g, p, x);
    let y = affine(&mut g, p, "qformer.prompt_head", h);
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFormer {
    pub config: QFormerConfig,
    pub params: ParamSet,
}

impl QFormer {
    pub fn init(config: QFormerConfig) -> Result<Self> {
        let params = init_qformer_params(&config)?;
        Ok(Self { config, params })
    }

    /// Prompt tokens (`n_queries × prompt_dim` per row) and pooled vectors
    /// (`b × pool_dim`).
    pub fn forward(&self, zs_hat: &Array2<f64>) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
        check_params(&self.params, &self.config)?;
        check_input(zs_hat, &self.config)?;
        let mut g = Graph::new();
        let x = g.constant(zs_hat.clone());
        let v = qformer_graph(&mut g, &self.params, &self.config, x);
        let n = self.config.n_queries;
        let prompt = g.value(v.prompt);
        let prompts = (0..zs_hat.nrows())
            .map(|i| prompt.slice(ndarray::s![i * n..(i + 1) * n, ..]).to_owned())
            .collect();
        Ok((prompts, g.value(v.pooled).clone()))
    }

    /// Minimises `MSE(prompt) + MSE(pooled)` over `(zs_hat, prompts, pooled)`
    /// pairs.
    pub fn train(
        &mut self,
        zs_hat: &Array2<f64>,
        prompts: &[Array2<f64>],
        pooled: &Array2<f64>,
        cfg: &BridgeTrainConfig,
    ) -> Result<FitReport> {
        check_input(zs_hat, &self.config)?;
        let (n, q) = (zs_hat.nrows(), self.config.n_queries);
        if prompts.len() != n || pooled.nrows() != n {
            return Err(Error::Shape("qformer inputs and targets differ in count".into()));
        }
        if prompts.iter().any(|t| t.dim() != (q, self.config.prompt_dim)) || pooled.ncols() != self.config.pool_dim {
            return Err(Error::Shape(format!(
                "targets must be {q}×{} prompt tokens and {}-d pooled vectors",
                self.config.prompt_dim, self.config.pool_dim
            )));
        }
        let stacked = |idx: &[usize]| {
            let mut t = Array2::zeros((idx.len() * q, self.config.prompt_dim));
            for (r, &i) in idx.iter().enumerate() {
                t.slice_mut(ndarray::s![r * q..(r + 1) * q, ..]).assign(&prompts[i]);
            }
            t
        };
        let config = self.config.clone();
        let loss = |g: &mut Graph, p: &ParamSet, idx: &[usize]| {
            let x = g.constant(zs_hat.select(ndarray::Axis(0), idx));
            let v = qformer_graph(g, p, &config, x);
            let tp = g.constant(stacked(idx));
            let tq = g.constant(pooled.select(ndarray::Axis(0), idx));
            let a = mse_graph(g, v.prompt, tp);
            let b = mse_graph(g, v.pooled, tq);
            g.add(a, b)
        };
        fit_params(
            &mut self.params,
            n,
            cfg,
            "qformer",
            |g, p, idx, _| loss(g, p, idx),
            |p, idx| {
                let mut g = Graph::new();
                let out = loss(&mut g, p, idx);
                Ok(g.scalar(out))
            },
        )
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
        f.push_meta("kind", KIND);
        f.push_meta("format_version", 1);
        f.push_meta("config", serde_json::to_string(&self.config).expect("config serialises"));
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        if f.require_meta("kind")? != KIND {
            return Err(Error::Format("tensor file is not a qformer".into()));
        }
        let config: QFormerConfig = serde_json::from_str(f.require_meta("config")?)
            .map_err(|e| Error::Format(format!("bad qformer config: {e}")))?;
        let params = ParamSet::from_tensor_map(f.tensors.clone());
        check_params(&params, &config).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(d_model: usize, input_dim: usize, n_queries: usize, n_heads: usize) -> QFormerConfig {
        QFormerConfig {
            n_queries,
            d_model,
            n_heads,
            ffn_dim: 3,
            input_dim,
            prompt_dim: 2,
            pool_dim: 2,
            seed: 1,
        }
    }

    fn eye(n: usize) -> Array2<f64> {
        Array2::eye(n)
    }

    #[test]
    fn config_checks() {
        assert!(cfg(4, 8, 2, 3).validate().is_err());
        assert!(cfg(4, 6, 2, 2).validate().is_err());
        assert_eq!(cfg(4, 8, 2, 2).tokens(), 2);
    }

    #[test]
    fn single_query_self_attention_returns_input() {
        let c = cfg(2, 2, 1, 1);
        let mut p = init_qformer_params(&c).unwrap();
        p.insert("qformer.self.value.weight", eye(2));
        p.insert("qformer.self.out.weight", eye(2));
        let zq = array![[0.3, -1.2]];
        let out = qformer_self_attention(&p, &c, &zq).unwrap();
        assert_eq!(out.output, zq);
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let c = cfg(4, 4, 3, 2);
        let p = init_qformer_params(&c).unwrap();
        let zq = array![[0.1, 0.2, -0.3, 0.5], [1.0, -0.4, 0.0, 0.2], [-0.7, 0.3, 0.9, -0.1]];
        let perm = [2, 0, 1];
        let zp = zq.select(ndarray::Axis(0), &perm);
        let a = qformer_self_attention(&p, &c, &zq).unwrap();
        let b = qformer_self_attention(&p, &c, &zp).unwrap();
        let ap = a.output.select(ndarray::Axis(0), &perm);
        for (x, y) in ap.iter().zip(b.output.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        for row in a.weights.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ffn_zero_in_zero_out() {
        let c = cfg(2, 2, 2, 1);
        let mut p = init_qformer_params(&c).unwrap();
        for n in ["qformer.ffn.fc1.bias", "qformer.ffn.fc2.bias", "qformer.prompt_head.bias"] {
            p.get_mut(n).unwrap().fill(0.0);
        }
        let out = qformer_ffn(&p, &c, &Array2::zeros((2, 2))).unwrap();
        assert_eq!(out.dim(), (2, 2));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_and_sensitivity() {
        let c = cfg(2, 4, 3, 1);
        let q = QFormer::init(c).unwrap();
        let x = array![[0.1, 0.2, 0.3, 0.4], [0.1, 0.2, 0.3, 0.5]];
        let (prompts, pooled) = q.forward(&x).unwrap();
        assert_eq!(prompts.len(), 2);
        assert_eq!(prompts[0].dim(), (3, 2));
        assert_eq!(pooled.dim(), (2, 2));
        assert_ne!(prompts[0], prompts[1]);
        assert_eq!(q.forward(&x).unwrap().1, pooled);
    }

    #[test]
    fn checkpoint_round_trip() {
        let q = QFormer::init(cfg(2, 4, 3, 2)).unwrap();
        let f = TensorFile::from_bytes(&q.to_tensor_file().to_bytes().unwrap()).unwrap();
        let back = QFormer::from_tensor_file(&f).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.fingerprint(), q.fingerprint());
    }
}
