//! Time-window and channel-region ablations of zero-shot performance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bank::TemplateBank;
use super::report::{evaluate, EvalReport};
use crate::alignment::{fit, AlignmentConfig};
use crate::data::{crop_set, mask_channels, mask_set, select_channels, ChannelGroupMap, TrialSet};
use crate::embed::CatalogEmbeddings;
use crate::encoder::{AlignmentModel, EncoderConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// `[start, t]`
    Expanding,
    /// `[t − width, t]`
    Sliding,
    /// `[t, end]`
    Decreasing,
    Spatial,
}

/// How a cell obtains its model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStrategy {
    /// Train a new model on the restricted data.
    #[default]
    Retrain,
    /// Zero the excluded samples or channels and reuse one model. Faster, but
    /// not equivalent to retraining.
    MaskAndReuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub window_ms: Option<[f64; 2]>,
    pub regions: Option<Vec<String>>,
    pub report: Option<EvalReport>,
    /// Why the cell was skipped.
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub mode: AblationMode,
    pub strategy: CellStrategy,
    pub cells: Vec<AblationCell>,
}

/// Data, templates and training settings shared by every cell.
pub struct AblationContext<'a> {
    pub train: &'a TrialSet,
    pub test: &'a TrialSet,
    pub embeddings: &'a CatalogEmbeddings,
    pub bank: &'a TemplateBank,
    pub encoder: &'a EncoderConfig,
    pub alignment: &'a AlignmentConfig,
    pub strategy: CellStrategy,
    /// Model reused by [`CellStrategy::MaskAndReuse`].
    pub base_model: Option<&'a AlignmentModel>,
}

/// Windows on a uniform grid of `step_ms` within `[start, end]`. The last
/// expanding window is always the full range.
pub fn window_grid(mode: AblationMode, start_ms: f64, end_ms: f64, step_ms: f64, width_ms: f64) -> Result<Vec<[f64; 2]>> {
    if !(step_ms > 0.0) || !step_ms.is_finite() {
        return Err(Error::Config("ablation step must be positive".into()));
    }
    let n = ((end_ms - start_ms) / step_ms + 1e-9).floor() as usize;
    let at = |i: usize| start_ms + i as f64 * step_ms;
    Ok(match mode {
        AblationMode::Expanding => {
            let mut w: Vec<[f64; 2]> = (1..=n).map(|i| [start_ms, at(i)]).collect();
            match w.last_mut() {
                Some(l) if l[1] >= end_ms - 1e-9 => l[1] = end_ms,
                _ => w.push([start_ms, end_ms]),
            }
            w
        }
        AblationMode::Sliding => (1..=n).map(|i| [at(i) - width_ms, at(i)]).collect(),
        AblationMode::Decreasing => (0..n).map(|i| [at(i), end_ms]).collect(),
        AblationMode::Spatial => {
            return Err(Error::Config("spatial ablation has no time grid".into()));
        }
    })
}

fn skippable(e: &Error) -> bool {
    matches!(e, Error::Bounds { .. } | Error::Config(_) | Error::EmptySelection)
}

fn run_cell(
    ctx: &AblationContext,
    label: String,
    window_ms: Option<[f64; 2]>,
    regions: Option<Vec<String>>,
    restrict: impl Fn(&TrialSet, bool) -> Result<TrialSet>,
) -> Result<AblationCell> {
    let outcome = (|| -> Result<EvalReport> {
        match ctx.strategy {
            CellStrategy::Retrain => {
                let train = restrict(ctx.train, true)?;
                let test = restrict(ctx.test, true)?;
                let state = fit(&train, ctx.encoder, ctx.embeddings, ctx.alignment, &mut |_| Ok(()))?;
                evaluate(&state.best_model(), &test, ctx.bank)
            }
            CellStrategy::MaskAndReuse => {
                let model = ctx
                    .base_model
                    .ok_or_else(|| Error::Config("mask-and-reuse needs a trained model".into()))?;
                evaluate(model, &restrict(ctx.test, false)?, ctx.bank)
            }
        }
    })();
    let (report, warning) = match outcome {
        Ok(r) => (Some(r), None),
        Err(e) if skippable(&e) => {
            log::warn!("ablation cell {label} skipped: {e}");
            (None, Some(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    Ok(AblationCell {
        label,
        window_ms,
        regions,
        report,
        warning,
    })
}

/// One cell per window of `mode` on a `step_ms` grid; sliding windows are
/// `width_ms` wide. Cells run in parallel and do not share state.
pub fn temporal_ablation(ctx: &AblationContext, mode: AblationMode, step_ms: f64, width_ms: f64) -> Result<AblationGrid> {
    let windows = window_grid(mode, ctx.train.start_ms, ctx.train.end_ms(), step_ms, width_ms)?;
    temporal_cells(ctx, mode, &windows)
}

/// As [`temporal_ablation`] on explicit windows.
pub fn temporal_cells(ctx: &AblationContext, mode: AblationMode, windows: &[[f64; 2]]) -> Result<AblationGrid> {
    let cells = windows
        .par_iter()
        .map(|&[a, b]| {
            run_cell(ctx, format!("[{a}, {b}]"), Some([a, b]), None, |ts, crop| {
                if crop {
                    crop_set(ts, a, b)
                } else {
                    mask_set(ts, a, b)
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationGrid {
        mode,
        strategy: ctx.strategy,
        cells,
    })
}

/// One cell per region set, restricted to the channels of `map` in it.
pub fn spatial_ablation(ctx: &AblationContext, groups: &[Vec<String>], map: &ChannelGroupMap) -> Result<AblationGrid> {
    map.validate_against(&ctx.train.channel_names)?;
    let cells = groups
        .par_iter()
        .map(|regions| {
            run_cell(ctx, regions.join("+"), None, Some(regions.clone()), |ts, select| {
                if select {
                    select_channels(ts, regions, map)
                } else {
                    mask_channels(ts, regions, map)
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationGrid {
        mode: AblationMode::Spatial,
        strategy: ctx.strategy,
        cells,
    })
}

impl AblationGrid {
    /// Tab-separated `cell, top1, top5` for both tasks, in percent.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("cell\tretrieval_top1\tretrieval_top5\tclassification_top1\tclassification_top5\tnote\n");
        for c in &self.cells {
            match &c.report {
                Some(r) => out.push_str(&format!(
                    "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t\n",
                    c.label,
                    100.0 * r.retrieval.top1,
                    100.0 * r.retrieval.top5,
                    100.0 * r.classification.top1,
                    100.0 * r.classification.top5
                )),
                None => out.push_str(&format!(
                    "{}\t\t\t\t\tskipped: {}\n",
                    c.label,
                    c.warning.as_deref().unwrap_or("").replace(['\t', '\n'], " ")
                )),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        let e = window_grid(AblationMode::Expanding, 0.0, 1000.0, 250.0, 100.0).unwrap();
        assert_eq!(e, vec![[0.0, 250.0], [0.0, 500.0], [0.0, 750.0], [0.0, 1000.0]]);
        let s = window_grid(AblationMode::Sliding, 0.0, 200.0, 50.0, 100.0).unwrap();
        assert_eq!(s, vec![[-50.0, 50.0], [0.0, 100.0], [50.0, 150.0], [100.0, 200.0]]);
        let d = window_grid(AblationMode::Decreasing, 0.0, 1000.0, 500.0, 100.0).unwrap();
        assert_eq!(d, vec![[0.0, 1000.0], [500.0, 1000.0]]);
        assert!(window_grid(AblationMode::Expanding, 0.0, 1.0, 0.0, 1.0).is_err());
        let e = window_grid(AblationMode::Expanding, 0.0, 300.0, 200.0, 100.0).unwrap();
        assert_eq!(e, vec![[0.0, 200.0], [0.0, 300.0]]);
    }
}
