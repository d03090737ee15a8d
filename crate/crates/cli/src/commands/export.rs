use neuralign::bridge::{export_conditions, prior_pairs, qformer_pairs, Prior, QFormer};
use neuralign::embed::CatalogEmbeddings;
use neuralign::Error;
use serde_json::json;

use super::{load_checked_model, prepare, to_json_pretty, write_report, Ctx};
use crate::manifest::{self, CommandRecord};
use crate::CliResult;

pub const CONDITIONS_EXT: &str = "conditions";

pub fn export(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let mut rec = CommandRecord::default();
    let prep = prepare(cfg, &mut rec)?;
    let prompts = prep
        .providers
        .prompt
        .clone()
        .ok_or_else(|| Error::Config("export needs prompt embeddings (prompt.tsv in the embeddings directory)".into()))?;
    let q = &cfg.bridge.qformer;
    if (q.n_queries, q.prompt_dim, q.pool_dim) != (prompts.tokens(), prompts.prompt_dim(), prompts.pool_dim()) {
        return Err(Error::Config(format!(
            "bridge.qformer produces {}×{} prompts with {}-d pooled vectors, the prompt table holds {}×{} and {}",
            q.n_queries,
            q.prompt_dim,
            q.pool_dim,
            prompts.tokens(),
            prompts.prompt_dim(),
            prompts.pool_dim()
        ))
        .into());
    }
    let emb = CatalogEmbeddings::build(&prep.train.catalog, &prep.providers)?;
    for s in &prep.subjects {
        let model = load_checked_model(ctx, s, None, &prep)?;
        let train = prep.train.subject(s);
        let bridge_dir = ctx.subject_dir("bridge", s);
        std::fs::create_dir_all(&bridge_dir)?;

        let mut prior = Prior::init(cfg.bridge.prior.clone())?;
        let prior_fit = rec.time(&format!("prior {s}"), |_| {
            let (zv_hat, zv) = prior_pairs(&model, &train, &emb)?;
            prior.train(&zv_hat, &zv, &cfg.bridge.train)
        })?;
        let mut qformer = QFormer::init(cfg.bridge.qformer.clone())?;
        let qformer_fit = rec.time(&format!("qformer {s}"), |_| {
            let (zs_hat, tokens, pooled) = qformer_pairs(&model, &train, prompts.as_ref())?;
            qformer.train(&zs_hat, &tokens, &pooled, &cfg.bridge.train)
        })?;
        let (prior_path, qformer_path) = (bridge_dir.join("prior.model"), bridge_dir.join("qformer.model"));
        prior.save(&prior_path)?;
        qformer.save(&qformer_path)?;
        rec.checkpoint(&prior_path);
        rec.checkpoint(&qformer_path);
        let fits = json!({ "prior": prior_fit, "qformer": qformer_fit });
        write_report(&bridge_dir.join("fit.json"), &to_json_pretty(&fits), &mut rec)?;

        let file = export_conditions(&prep.test.subject(s), &model, Some(&prior), Some(&qformer))?;
        let path = ctx.out().join("export").join(format!("{s}.{CONDITIONS_EXT}"));
        std::fs::create_dir_all(path.parent().expect("has parent"))?;
        file.write(&path)?;
        rec.report(&path);
        rec.fingerprints.insert(format!("alignment {s}"), file.alignment_fingerprint.clone());
        rec.fingerprints.insert(format!("prior {s}"), file.prior_fingerprint.clone());
        rec.fingerprints.insert(format!("qformer {s}"), file.qformer_fingerprint.clone());
        println!("{s}: {} condition bundles written to {}", file.bundles.len(), path.display());
    }
    manifest::record(ctx.out(), "export", cfg.to_json(), rec)?;
    Ok(())
}
