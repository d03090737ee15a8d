use neuralign::data::{generate_synthetic, write_dataset, TrialSet};
use neuralign::embed::write_oracle_tables;
use neuralign::Error;

use super::{to_json_pretty, write_report, Ctx};
use crate::manifest::{self, CommandRecord};
use crate::CliResult;

fn summary(name: &str, ts: &TrialSet) -> String {
    format!(
        "{name}: {} trials, {} images, {} categories, {} subjects, {} channels × {} samples at {} Hz from {} ms",
        ts.len(),
        ts.catalog.len(),
        ts.category_ids().len(),
        ts.subjects().len(),
        ts.channels(),
        ts.samples,
        ts.sample_rate_hz,
        ts.start_ms
    )
}

pub fn synth(ctx: &Ctx) -> CliResult<()> {
    let spec = ctx.cfg.dataset.synthetic.clone().unwrap_or_default();
    let root = ctx.cfg.dataset_dir();
    let emb_dir = ctx.cfg.embeddings_dir();
    let occupied = root.exists() && std::fs::read_dir(&root)?.next().is_some();
    if occupied {
        if !ctx.force {
            return Err(Error::Config(format!("{} already exists; pass --force to overwrite", root.display())).into());
        }
        for sub in [root.join("train"), root.join("test"), emb_dir.clone()] {
            if sub.is_dir() {
                std::fs::remove_dir_all(&sub)?;
            }
        }
    }
    let mut rec = CommandRecord::default();
    let ds = rec.time("generate", |_| generate_synthetic(&spec))?;
    rec.time("write", |_| {
        write_dataset(&ds.train, &ds.test, &root)?;
        std::fs::create_dir_all(&emb_dir)?;
        write_oracle_tables(&ds, &emb_dir)
    })?;
    let text = format!("{}\n{}\n", summary("train", &ds.train), summary("test", &ds.test));
    print!("{text}");
    write_report(&ctx.out().join("synth").join("summary.txt"), &text, &mut rec)?;
    write_report(&ctx.out().join("synth").join("spec.json"), &to_json_pretty(&spec), &mut rec)?;
    rec.inputs.extend(crate::manifest::hash_tree(&root)?);
    manifest::record(ctx.out(), "synth", ctx.cfg.to_json(), rec)?;
    Ok(())
}
