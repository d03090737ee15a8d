use std::path::Path;

use neuralign::embed::VectorTable;
use neuralign::metrics::{
    evaluate_dirs, pair_lines, per_rank_table, table4, FeatureExtractor, MetricOptions, RandomProjection, TableExtractor,
};
use neuralign::Error;

use super::{to_json_pretty, write_report, Ctx};
use crate::manifest::{self, CommandRecord};
use crate::{CliResult, MetricsArgs};

/// The stock random-projection extractors with `name=table` overrides
/// applied.
pub fn build_extractors(seed: u64, overrides: &[String]) -> neuralign::Result<Vec<Box<dyn FeatureExtractor>>> {
    let mut extractors = RandomProjection::standard(seed);
    for spec in overrides {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--extractor expects name=path, got {spec:?}")))?;
        let table = VectorTable::read(Path::new(path))?;
        let x: Box<dyn FeatureExtractor> = Box::new(TableExtractor::new(name, table));
        match extractors.iter().position(|e| e.name() == name) {
            Some(i) => extractors[i] = x,
            None => extractors.push(x),
        }
    }
    Ok(extractors)
}

pub fn metrics(ctx: &Ctx, args: &MetricsArgs) -> CliResult<()> {
    let mut rec = CommandRecord::default();
    rec.hash_inputs(&args.generated)?;
    rec.hash_inputs(&args.reference)?;
    let extractors = build_extractors(ctx.cfg.seed, &args.extractors)?;
    for x in &extractors {
        rec.fingerprints.insert(format!("extractor {}", x.name()), x.fingerprint());
    }
    let opts = MetricOptions {
        candidates: args.candidates,
        rank_by: args.rank_by.clone(),
    };
    let report = rec.time("metrics", |_| evaluate_dirs(&args.generated, &args.reference, &extractors, &opts))?;
    let dir = ctx.out().join("metrics");
    let table = table4(&[(args.label.as_str(), &report.report)]);
    print!("{table}");
    write_report(&dir.join("table4.tsv"), &table, &mut rec)?;
    write_report(&dir.join("pairs.jsonl"), &pair_lines(&report.pairs), &mut rec)?;
    write_report(&dir.join("report.json"), &to_json_pretty(&report.report), &mut rec)?;
    if !report.per_rank.is_empty() {
        write_report(&dir.join("per_rank.tsv"), &per_rank_table(&report.per_rank), &mut rec)?;
        write_report(&dir.join("rankings.json"), &to_json_pretty(&report.rankings), &mut rec)?;
    }
    manifest::record(ctx.out(), "metrics", ctx.cfg.to_json(), rec)?;
    Ok(())
}
