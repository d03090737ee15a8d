use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::bank::{classify, retrieve, topk_accuracy, Task, TemplateBank, TopKReport};
use crate::data::{NeuralTrial, TrialSet};
use crate::encoder::AlignmentModel;
use crate::error::{Error, Result};

/// Retrieval and classification of one subject's test trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subject: String,
    pub retrieval: TopKReport,
    pub classification: TopKReport,
}

impl EvalReport {
    pub fn task(&self, task: Task) -> &TopKReport {
        match task {
            Task::Retrieval => &self.retrieval,
            Task::Classification => &self.classification,
        }
    }
}

/// Encodes `test` with `model` and scores both tasks against `bank`.
pub fn evaluate(model: &AlignmentModel, test: &TrialSet, bank: &TemplateBank) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    let subjects = test.subjects();
    let trials: Vec<&NeuralTrial> = test.trials.iter().collect();
    let (zv, zs) = model.embed(&trials)?;
    let image_truth: Vec<i64> = trials.iter().map(|t| t.image_id).collect();
    let cat_truth: Vec<i64> = trials.iter().map(|t| t.category_id).collect();
    Ok(EvalReport {
        subject: subjects.join("+"),
        retrieval: topk_accuracy(&retrieve(&zv, bank)?, &image_truth, Task::Retrieval)?,
        classification: topk_accuracy(&classify(&zs, bank)?, &cat_truth, Task::Classification)?,
    })
}

/// One row of a results table: a method or ablation cell with one report per
/// subject.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub label: String,
    pub reports: Vec<EvalReport>,
}

/// Tab-separated table with top-1/top-5 per subject plus the subject average,
/// in percent. Subjects missing from a row are left blank.
pub fn results_table(rows: &[ResultRow], task: Task) -> String {
    let subjects: BTreeSet<&str> = rows
        .iter()
        .flat_map(|r| r.reports.iter().map(|e| e.subject.as_str()))
        .collect();
    let mut out = String::from("method");
    for s in &subjects {
        let _ = write!(out, "\t{s}_top1\t{s}_top5");
    }
    out.push_str("\tavg_top1\tavg_top5\n");
    for row in rows {
        out.push_str(&row.label);
        let (mut s1, mut s5) = (0.0, 0.0);
        for s in &subjects {
            match row.reports.iter().find(|e| e.subject == *s) {
                Some(e) => {
                    let r = e.task(task);
                    s1 += r.top1;
                    s5 += r.top5;
                    let _ = write!(out, "\t{:.2}\t{:.2}", 100.0 * r.top1, 100.0 * r.top5);
                }
                None => out.push_str("\t\t"),
            }
        }
        let n = row.reports.len().max(1) as f64;
        let _ = writeln!(out, "\t{:.2}\t{:.2}", 100.0 * s1 / n, 100.0 * s5 / n);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub label: String,
    pub subject: String,
    pub task: Task,
    pub query_id: i64,
    pub truth: i64,
    pub rank: usize,
    pub n_candidates: usize,
}

/// One JSON line per query and task.
pub fn rank_lines(label: &str, report: &EvalReport) -> String {
    let mut out = String::new();
    for r in [&report.retrieval, &report.classification] {
        for ((&q, &t), &rank) in r.query_ids.iter().zip(&r.truth).zip(&r.ranks) {
            let rec = RankRecord {
                label: label.to_string(),
                subject: report.subject.clone(),
                task: r.task,
                query_id: q,
                truth: t,
                rank,
                n_candidates: r.n_candidates,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serialises"));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(subject: &str, top1: f64) -> EvalReport {
        let r = TopKReport {
            task: Task::Retrieval,
            top1,
            top5: 1.0,
            n_queries: 2,
            n_candidates: 2,
            ranks: vec![1, 2],
            query_ids: vec![5, 6],
            truth: vec![5, 6],
        };
        EvalReport {
            subject: subject.into(),
            retrieval: r.clone(),
            classification: TopKReport {
                task: Task::Classification,
                ..r
            },
        }
    }

    #[test]
    fn table_layout_and_average() {
        let rows = vec![ResultRow {
            label: "full".into(),
            reports: vec![rep("sub-01", 0.5), rep("sub-02", 0.25)],
        }];
        let t = results_table(&rows, Task::Retrieval);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "method\tsub-01_top1\tsub-01_top5\tsub-02_top1\tsub-02_top5\tavg_top1\tavg_top5");
        assert_eq!(lines[1], "full\t50.00\t100.00\t25.00\t100.00\t37.50\t100.00");
    }

    #[test]
    fn rank_dump_has_a_line_per_query_and_task() {
        let s = rank_lines("full", &rep("sub-01", 0.5));
        assert_eq!(s.lines().count(), 4);
        let first: RankRecord = serde_json::from_str(s.lines().next().unwrap()).unwrap();
        assert_eq!((first.query_id, first.rank, first.task), (5, 1, Task::Retrieval));
    }
}
