//! Map from neural-visual vectors to image-embedding space.
//!
//! `mlp_direct`: `ŷ = c + fc2(GELU(c·W1 + b1))`.
//!
//! `denoising`: the same network additionally sees a noisy target `x_t` and
//! its noise level `σ_t = s·√(1 − ᾱ_t)`,
//! `x̂0 = c + fc2(GELU(c·W1 + b1 + x_t·Wn + σ_t·w))`, trained to predict
//! `x0` under a cosine schedule and sampled with deterministic DDIM steps
//! from `x_T = s·ε`. With one step and `s = 0` both modes coincide.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::fit::{fit_params, BridgeTrainConfig, FitReport};
use crate::alignment::loss::mse_graph;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{seeded_rng, xavier, ParamSet, TensorFile};

const KIND: &str = "prior";
const SCHEDULE_OFFSET: f64 = 0.008;
const PREDICT_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    #[default]
    MlpDirect,
    Denoising,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub mode: PriorMode,
    pub dim: usize,
    pub hidden_dim: usize,
    pub n_steps: usize,
    /// Scale `s` of the noise in the forward process and the initial draw.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            mode: PriorMode::MlpDirect,
            dim: 1024,
            hidden_dim: 1024,
            n_steps: 50,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("prior dim and hidden_dim must be positive".into()));
        }
        if self.mode == PriorMode::Denoising && self.n_steps == 0 {
            return Err(Error::Config("denoising prior needs n_steps ≥ 1".into()));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::Config("prior noise_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `ᾱ_t` for `t = 0..=n`, cosine schedule with `ᾱ_0 = 1` and `ᾱ_n = 0`.
pub fn cosine_alpha_bar(n_steps: usize) -> Vec<f64> {
    let f = |t: f64| {
        let x = (t / n_steps as f64 + SCHEDULE_OFFSET) / (1.0 + SCHEDULE_OFFSET) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0.0);
    let mut a: Vec<f64> = (0..=n_steps).map(|t| (f(t as f64) / f0).clamp(0.0, 1.0)).collect();
    a[0] = 1.0;
    a[n_steps] = 0.0;
    a
}

pub fn init_prior_params(cfg: &PriorConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed, 0);
    let (d, h) = (cfg.dim, cfg.hidden_dim);
    let mut p = ParamSet::new();
    p.insert("prior.fc1.weight", xavier(&mut rng, d, h));
    p.insert("prior.fc1.bias", Array2::zeros((1, h)));
    p.insert("prior.fc2.weight", xavier(&mut rng, h, d));
    p.insert("prior.fc2.bias", Array2::zeros((1, d)));
    if cfg.mode == PriorMode::Denoising {
        p.insert("prior.noisy.weight", xavier(&mut rng, d, h));
        p.insert("prior.level.weight", xavier(&mut rng, 1, h));
    }
    Ok(p)
}

/// Network output for condition `c`; `noisy` is `(x_t, σ_t per row)` in
/// denoising mode.
pub fn prior_graph(g: &mut Graph, p: &ParamSet, c: Var, noisy: Option<(Var, Var)>) -> Var {
    let w1 = p.var(g, "prior.fc1.weight");
    let b1 = p.var(g, "prior.fc1.bias");
    let h = g.matmul(c, w1);
    let mut h = g.add_row(h, b1);
    if let Some((xt, level)) = noisy {
        let wn = p.var(g, "prior.noisy.weight");
        let wl = p.var(g, "prior.level.weight");
        let a = g.matmul(xt, wn);
        let b = g.matmul(level, wl);
        h = g.add(h, a);
        h = g.add(h, b);
    }
    let h = g.gelu(h);
    let w2 = p.var(g, "prior.fc2.weight");
    let b2 = p.var(g, "prior.fc2.bias");
    let y = g.matmul(h, w2);
    let y = g.add_row(y, b2);
    g.add(c, y)
}

fn normal(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub config: PriorConfig,
    pub params: ParamSet,
}

impl Prior {
    pub fn init(config: PriorConfig) -> Result<Self> {
        let params = init_prior_params(&config)?;
        Ok(Self { config, params })
    }

    fn check(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.config.dim || x.nrows() == 0 {
            return Err(Error::Shape(format!(
                "prior input {:?} does not have width {}",
                x.dim(),
                self.config.dim
            )));
        }
        Ok(())
    }

    /// One network evaluation; `t` in `1..=n_steps` for denoising.
    fn denoise(&self, c: &Array2<f64>, xt: &Array2<f64>, level: f64) -> Array2<f64> {
        let mut g = Graph::new();
        let cv = g.constant(c.clone());
        let noisy = match self.config.mode {
            PriorMode::MlpDirect => None,
            PriorMode::Denoising => {
                let x = g.constant(xt.clone());
                let l = g.constant(Array2::from_elem((c.nrows(), 1), level));
                Some((x, l))
            }
        };
        let y = prior_graph(&mut g, &self.params, cv, noisy);
        g.value(y).clone()
    }

    /// Image-space predictions for `zv_hat` rows. Deterministic: the initial
    /// draw of the denoising sampler comes from the config seed.
    pub fn predict(&self, zv_hat: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(zv_hat)?;
        let (b, d) = zv_hat.dim();
        match self.config.mode {
            PriorMode::MlpDirect => Ok(self.denoise(zv_hat, &Array2::zeros((b, d)), 0.0)),
            PriorMode::Denoising => {
                let n = self.config.n_steps;
                let s = self.config.noise_scale;
                let ab = cosine_alpha_bar(n);
                let mut rng = seeded_rng(self.config.seed, PREDICT_STREAM);
                let mut x = normal(&mut rng, b, d) * s;
                let mut x0 = Array2::zeros((b, d));
                for t in (1..=n).rev() {
                    let sigma = s * (1.0 - ab[t]).sqrt();
                    x0 = self.denoise(zv_hat, &x, sigma);
                    if t > 1 {
                        let prev = ab[t - 1];
                        // DDIM with η = 0: reuse the implied noise.
                        let eps = if sigma > 0.0 {
                            (&x - &(&x0 * ab[t].sqrt())) / sigma
                        } else {
                            Array2::zeros((b, d))
                        };
                        x = &x0 * prev.sqrt() + eps * (s * (1.0 - prev).sqrt());
                    }
                }
                Ok(x0)
            }
        }
    }

    /// Trains on `(zv_hat, zv)` pairs with the mean squared error.
    pub fn train(&mut self, zv_hat: &Array2<f64>, zv: &Array2<f64>, cfg: &BridgeTrainConfig) -> Result<FitReport> {
        self.check(zv_hat)?;
        if zv.dim() != zv_hat.dim() {
            return Err(Error::Shape(format!("prior inputs {:?} vs targets {:?}", zv_hat.dim(), zv.dim())));
        }
        let config = self.config.clone();
        let ab = cosine_alpha_bar(config.n_steps.max(1));
        let pick = |m: &Array2<f64>, idx: &[usize]| m.select(ndarray::Axis(0), idx);
        let loss = |g: &mut Graph, p: &ParamSet, idx: &[usize], rng: &mut ChaCha8Rng| {
            let c = g.constant(pick(zv_hat, idx));
            let x0 = pick(zv, idx);
            let noisy = match config.mode {
                PriorMode::MlpDirect => None,
                PriorMode::Denoising => {
                    let (b, d) = x0.dim();
                    let s = config.noise_scale;
                    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=config.n_steps)).collect();
                    let eps = normal(rng, b, d);
                    let mut xt = Array2::zeros((b, d));
                    let mut level = Array2::zeros((b, 1));
                    for (i, &t) in ts.iter().enumerate() {
                        let (a, sig) = (ab[t].sqrt(), (1.0 - ab[t]).sqrt());
                        for j in 0..d {
                            xt[[i, j]] = a * x0[[i, j]] + s * sig * eps[[i, j]];
                        }
                        level[[i, 0]] = s * sig;
                    }
                    Some((g.constant(xt), g.constant(level)))
                }
            };
            let y = prior_graph(g, p, c, noisy);
            let target = g.constant(x0);
            mse_graph(g, y, target)
        };
        fit_params(&mut self.params, zv_hat.nrows(), cfg, "prior", loss, |p, idx| {
            let model = Prior {
                config: self.config.clone(),
                params: p.clone(),
            };
            let pred = model.predict(&pick(zv_hat, idx))?;
            let diff = pred - pick(zv, idx);
            Ok(diff.mapv(|v| v * v).mean().unwrap_or(0.0))
        })
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
            return Err(Error::Format("tensor file is not a prior".into()));
        }
        let config: PriorConfig = serde_json::from_str(f.require_meta("config")?)
            .map_err(|e| Error::Format(format!("bad prior config: {e}")))?;
        let params = ParamSet::from_tensor_map(f.tensors.clone());
        for (name, t) in init_prior_params(&config)?.iter() {
            match params.get(name) {
                Some(v) if v.dim() == t.dim() => {}
                _ => return Err(Error::Format(format!("prior checkpoint lacks or misshapes {name}"))),
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

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: PriorMode) -> PriorConfig {
        PriorConfig {
            mode,
            dim: 4,
            hidden_dim: 8,
            n_steps: 5,
            noise_scale: 1.0,
            seed: 2,
        }
    }

    #[test]
    fn schedule_endpoints_and_monotone() {
        let a = cosine_alpha_bar(10);
        assert_eq!((a[0], a[10]), (1.0, 0.0));
        assert!(a.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(cosine_alpha_bar(1), vec![1.0, 0.0]);
    }

    #[test]
    fn predict_is_deterministic() {
        let p = Prior::init(cfg(PriorMode::Denoising)).unwrap();
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i + 2 * j) as f64 * 0.1);
        assert_eq!(p.predict(&x).unwrap(), p.predict(&x).unwrap());
        assert!(p.predict(&Array2::zeros((1, 3))).is_err());
    }

    #[test]
    fn zero_steps_rejected_for_denoising() {
        let c = PriorConfig { n_steps: 0, ..cfg(PriorMode::Denoising) };
        assert!(c.validate().is_err());
        assert!(PriorConfig { n_steps: 0, ..cfg(PriorMode::MlpDirect) }.validate().is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = Prior::init(cfg(PriorMode::Denoising)).unwrap();
        let f = TensorFile::from_bytes(&p.to_tensor_file().to_bytes().unwrap()).unwrap();
        assert_eq!(Prior::from_tensor_file(&f).unwrap(), p);
    }
}
