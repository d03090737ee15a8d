//! From aligned neural representations to generator conditions.

mod bundle;
mod fit;
mod prior;
mod qformer;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

pub use bundle::{ConditionBundle, ConditionFile, CONDITIONS_MAGIC};
pub use fit::{BridgeTrainConfig, FitReport};
pub use prior::{cosine_alpha_bar, init_prior_params, prior_graph, Prior, PriorConfig, PriorMode};
pub use qformer::{
    cross_attention_graph, ffn_graph, init_qformer_params, qformer_cross_attention, qformer_ffn, qformer_graph,
    qformer_self_attention, self_attention_graph, AttentionOutput, QFormer, QFormerConfig,
};

use crate::alignment::loss::mse_graph;
use crate::data::{NeuralTrial, TrialSet};
use crate::embed::{CatalogEmbeddings, PromptProvider};
use crate::encoder::AlignmentModel;
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, GradCheckReport};
use crate::params::seeded_rng;

/// `(ẑ_v, z_v)` for every trial of `set`.
pub fn prior_pairs(model: &AlignmentModel, set: &TrialSet, emb: &CatalogEmbeddings) -> Result<(Array2<f64>, Array2<f64>)> {
    let trials: Vec<&NeuralTrial> = set.trials.iter().collect();
    let (zv_hat, _) = model.embed(&trials)?;
    let (zv, _, _) = emb.gather(&zv_hat.ids)?;
    Ok((zv_hat.data, zv))
}

/// `ẑ_s` with prompt-token and pooled targets of the fused "coarse. fine"
/// prompt of each trial's stimulus.
pub fn qformer_pairs(
    model: &AlignmentModel,
    set: &TrialSet,
    prompts: &dyn PromptProvider,
) -> Result<(Array2<f64>, Vec<Array2<f64>>, Array2<f64>)> {
    let trials: Vec<&NeuralTrial> = set.trials.iter().collect();
    let (_, zs_hat) = model.embed(&trials)?;
    let mut tokens = Vec::with_capacity(trials.len());
    let mut pooled = Array2::zeros((trials.len(), prompts.pool_dim()));
    for (i, t) in trials.iter().enumerate() {
        let rec = set.stimulus(t.image_id).ok_or_else(|| {
            Error::Protocol(format!("image {} is not in the catalog", t.image_id))
        })?;
        let (tok, pool) = prompts.embed_prompt(&rec.fused_prompt()).map_err(|e| match e {
            Error::Provider { reason, .. } => Error::Provider {
                stimulus: format!("image {} (prompt)", t.image_id),
                reason,
            },
            other => other,
        })?;
        tokens.push(tok);
        pooled.row_mut(i).assign(&pool);
    }
    Ok((zs_hat.data, tokens, pooled))
}

/// One bundle per trial of `test`, in trial order.
pub fn export_conditions(
    test: &TrialSet,
    model: &AlignmentModel,
    prior: Option<&Prior>,
    qformer: Option<&QFormer>,
) -> Result<ConditionFile> {
    let prior = prior.ok_or_else(|| Error::Config("export needs a trained prior".into()))?;
    let qformer = qformer.ok_or_else(|| Error::Config("export needs a trained qformer".into()))?;
    if test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    let trials: Vec<&NeuralTrial> = test.trials.iter().collect();
    let (zv_hat, zs_hat) = model.embed(&trials)?;
    let image = prior.predict(&zv_hat.data)?;
    let (prompts, pooled) = qformer.forward(&zs_hat.data)?;
    let bundles = trials
        .iter()
        .enumerate()
        .map(|(i, t)| ConditionBundle {
            subject_id: t.subject_id.clone(),
            image_id: t.image_id,
            image_embedding: image.row(i).mapv(|v| v as f32),
            prompt_embeddings: prompts[i].mapv(|v| v as f32),
            pooled_prompt_embedding: pooled.row(i).mapv(|v| v as f32),
        })
        .collect();
    let file = ConditionFile {
        image_dim: prior.config.dim,
        prompt_tokens: qformer.config.n_queries,
        prompt_dim: qformer.config.prompt_dim,
        pool_dim: qformer.config.pool_dim,
        alignment_fingerprint: model.fingerprint(),
        prior_fingerprint: prior.fingerprint(),
        qformer_fingerprint: qformer.fingerprint(),
        bundles,
    };
    file.validate()?;
    Ok(file)
}

fn normal(seed: u64, stream: u64, r: usize, c: usize) -> Array2<f64> {
    let mut rng = seeded_rng(seed, stream);
    Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(&mut rng))
}

/// Finite-difference check of the Q-Former objective on a `B = 4` batch with
/// two heads and two input tokens.
pub fn qformer_grad_check(seed: u64, probes: usize, step: f64) -> Result<GradCheckReport> {
    let cfg = QFormerConfig {
        n_queries: 3,
        d_model: 4,
        n_heads: 2,
        ffn_dim: 5,
        input_dim: 8,
        prompt_dim: 3,
        pool_dim: 2,
        seed,
    };
    let params = init_qformer_params(&cfg)?;
    let b = 4;
    let x = normal(seed, 21, b, cfg.input_dim);
    let tp = normal(seed, 22, b * cfg.n_queries, cfg.prompt_dim);
    let tq = normal(seed, 23, b, cfg.pool_dim);
    Ok(check_gradients(&params, probes, step, seed, |g, p| {
        let xv = g.constant(x.clone());
        let v = qformer_graph(g, p, &cfg, xv);
        let a = g.constant(tp.clone());
        let c = g.constant(tq.clone());
        let l1 = mse_graph(g, v.prompt, a);
        let l2 = mse_graph(g, v.pooled, c);
        g.add(l1, l2)
    }))
}

/// Finite-difference check of the prior objective in both modes (the
/// denoising mode at a fixed noisy input and noise level).
pub fn prior_grad_check(seed: u64, probes: usize, step: f64) -> Result<GradCheckReport> {
    let b = 4;
    let mut report = GradCheckReport::empty();
    for mode in [PriorMode::MlpDirect, PriorMode::Denoising] {
        let cfg = PriorConfig {
            mode,
            dim: 5,
            hidden_dim: 6,
            n_steps: 4,
            noise_scale: 1.0,
            seed,
        };
        let params = init_prior_params(&cfg)?;
        let c = normal(seed, 31, b, cfg.dim);
        let xt = normal(seed, 32, b, cfg.dim);
        let y = normal(seed, 33, b, cfg.dim);
        let level = Array2::from_shape_fn((b, 1), |(i, _)| 0.2 + 0.2 * i as f64);
        let rep = check_gradients(&params, probes, step, seed, |g, p| {
            let cv = g.constant(c.clone());
            let noisy = (mode == PriorMode::Denoising).then(|| (g.constant(xt.clone()), g.constant(level.clone())));
            let out = prior_graph(g, p, cv, noisy);
            let t = g.constant(y.clone());
            mse_graph(g, out, t)
        });
        let mut renamed = rep.clone();
        let tag = match mode {
            PriorMode::MlpDirect => "mlp_direct",
            PriorMode::Denoising => "denoising",
        };
        renamed.per_tensor = rep.per_tensor.into_iter().map(|(k, v)| (format!("{k} [{tag}]"), v)).collect();
        renamed.worst = rep.worst.map(|(k, i)| (format!("{k} [{tag}]"), i));
        report.merge(renamed);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::FD_STEP;

    #[test]
    fn bridge_gradients_match_finite_differences() {
        let q = qformer_grad_check(0, 8, FD_STEP).unwrap();
        assert!(q.max_rel_error < 1e-4, "{q:?}");
        assert!(q.per_tensor.contains_key("qformer.queries"));
        let p = prior_grad_check(0, 8, FD_STEP).unwrap();
        assert!(p.max_rel_error < 1e-4, "{p:?}");
        assert!(p.per_tensor.contains_key("prior.noisy.weight [denoising]"));
    }

    fn bundle(id: i64) -> ConditionBundle {
        ConditionBundle {
            subject_id: "sub-01".into(),
            image_id: id,
            image_embedding: ndarray::arr1(&[1.5f32, -0.25, f32::MIN_POSITIVE]),
            prompt_embeddings: Array2::from_shape_fn((2, 2), |(i, j)| (i * 2 + j) as f32 / 3.0),
            pooled_prompt_embedding: ndarray::arr1(&[0.1f32]),
        }
    }

    fn file() -> ConditionFile {
        ConditionFile {
            image_dim: 3,
            prompt_tokens: 2,
            prompt_dim: 2,
            pool_dim: 1,
            alignment_fingerprint: "aa".into(),
            prior_fingerprint: "bb".into(),
            qformer_fingerprint: "cc".into(),
            bundles: vec![bundle(7), bundle(-3)],
        }
    }

    #[test]
    fn condition_file_round_trip_is_exact() {
        let f = file();
        let bytes = f.to_bytes().unwrap();
        let back = ConditionFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(ConditionFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn condition_file_rejects_bad_shapes() {
        let mut f = file();
        f.bundles[0].pooled_prompt_embedding = ndarray::arr1(&[0.0f32, 1.0]);
        assert!(f.to_bytes().is_err());
    }
}
