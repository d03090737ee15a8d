use std::collections::BTreeMap;
use std::path::Path;

use neuralign::zeroshot::{evaluate, rank_lines, results_table, ResultRow, Task, TemplateBank, TopKReport};
use neuralign::Error;
use serde::Serialize;

use super::{load_checked_model, prepare, to_json_pretty, write_report, Ctx};
use crate::manifest::{self, CommandRecord};
use crate::CliResult;

pub const METHOD_LABEL: &str = "neuralign";

#[derive(Serialize)]
struct TaskSummary {
    top1: f64,
    top5: f64,
    chance_top1: f64,
    chance_top5: f64,
    n_queries: usize,
    n_candidates: usize,
    top_k: BTreeMap<usize, f64>,
}

fn summarize(r: &TopKReport, ks: &[usize]) -> TaskSummary {
    TaskSummary {
        top1: r.top1,
        top5: r.top5,
        chance_top1: r.chance(1),
        chance_top5: r.chance(5),
        n_queries: r.n_queries,
        n_candidates: r.n_candidates,
        top_k: ks.iter().map(|&k| (k, r.accuracy_at(k))).collect(),
    }
}

#[derive(Serialize)]
struct SubjectSummary {
    subject: String,
    model: String,
    retrieval: TaskSummary,
    classification: TaskSummary,
}

pub fn eval(ctx: &Ctx, checkpoint: Option<&Path>) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let mut rec = CommandRecord::default();
    let prep = prepare(cfg, &mut rec)?;
    if checkpoint.is_some() && prep.subjects.len() != 1 {
        return Err(Error::Config("--checkpoint needs exactly one subject (set dataset.subjects)".into()).into());
    }
    let bank = TemplateBank::build(&prep.test.catalog, &prep.providers)?;
    rec.fingerprints.insert("templates".into(), bank.fingerprint.clone());
    let mut reports = Vec::new();
    let mut summaries = Vec::new();
    let mut ranks = String::new();
    for s in &prep.subjects {
        let model = load_checked_model(ctx, s, checkpoint, &prep)?;
        let report = rec.time(&format!("eval {s}"), |_| evaluate(&model, &prep.test.subject(s), &bank))?;
        println!(
            "{s}\tretrieval top-1 {:.2}% top-5 {:.2}%\tclassification top-1 {:.2}% top-5 {:.2}%",
            100.0 * report.retrieval.top1,
            100.0 * report.retrieval.top5,
            100.0 * report.classification.top1,
            100.0 * report.classification.top5
        );
        ranks.push_str(&rank_lines(METHOD_LABEL, &report));
        rec.fingerprints.insert(format!("alignment {s}"), model.fingerprint());
        summaries.push(SubjectSummary {
            subject: s.clone(),
            model: model.fingerprint(),
            retrieval: summarize(&report.retrieval, &cfg.eval.top_k),
            classification: summarize(&report.classification, &cfg.eval.top_k),
        });
        reports.push(report);
    }
    let rows = [ResultRow {
        label: METHOD_LABEL.into(),
        reports,
    }];
    let dir = ctx.out().join("eval");
    write_report(&dir.join("retrieval.tsv"), &results_table(&rows, Task::Retrieval), &mut rec)?;
    write_report(&dir.join("classification.tsv"), &results_table(&rows, Task::Classification), &mut rec)?;
    write_report(&dir.join("ranks.jsonl"), &ranks, &mut rec)?;
    write_report(&dir.join("report.json"), &to_json_pretty(&summaries), &mut rec)?;
    manifest::record(ctx.out(), "eval", cfg.to_json(), rec)?;
    Ok(())
}
