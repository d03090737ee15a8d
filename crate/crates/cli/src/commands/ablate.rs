use std::fmt::Write as _;

use neuralign::data::ChannelGroupMap;
use neuralign::embed::CatalogEmbeddings;
use neuralign::zeroshot::{spatial_ablation, temporal_ablation, AblationContext, AblationGrid, AblationMode, CellStrategy, TemplateBank};
use neuralign::Error;

use super::{load_checked_model, prepare, to_json_pretty, write_report, Ctx};
use crate::manifest::{self, CommandRecord};
use crate::CliResult;

pub fn mode_name(m: AblationMode) -> &'static str {
    match m {
        AblationMode::Expanding => "expanding",
        AblationMode::Sliding => "sliding",
        AblationMode::Decreasing => "decreasing",
        AblationMode::Spatial => "spatial",
    }
}

/// `(t, accuracies)` rows: `t` is the window end for expanding and sliding
/// windows and the window start for decreasing ones. Skipped cells read `NA`.
pub fn curve_table(grid: &AblationGrid) -> String {
    let mut out = String::from("t_ms\twindow_start_ms\twindow_end_ms\tretrieval_top1\tretrieval_top5\tclassification_top1\tclassification_top5\n");
    for c in &grid.cells {
        let Some([a, b]) = c.window_ms else { continue };
        let t = if grid.mode == AblationMode::Decreasing { a } else { b };
        let _ = write!(out, "{t}\t{a}\t{b}");
        match &c.report {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
                    100.0 * r.retrieval.top1,
                    100.0 * r.retrieval.top5,
                    100.0 * r.classification.top1,
                    100.0 * r.classification.top5
                );
            }
            None => out.push_str("\tNA\tNA\tNA\tNA\n"),
        }
    }
    out
}

pub fn ablate(ctx: &Ctx, modes: &[AblationMode]) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let acfg = &cfg.eval.ablation;
    let modes = if modes.is_empty() { acfg.modes.clone() } else { modes.to_vec() };
    if modes.is_empty() {
        return Err(Error::Config("no ablation modes configured".into()).into());
    }
    let mut rec = CommandRecord::default();
    let prep = prepare(cfg, &mut rec)?;
    let emb = CatalogEmbeddings::build(&prep.train.catalog, &prep.providers)?;
    let bank = TemplateBank::build(&prep.test.catalog, &prep.providers)?;
    let map = match &acfg.channel_map {
        Some(p) => ChannelGroupMap::load(p)?,
        None => ChannelGroupMap::default_63(),
    };
    let groups: Vec<Vec<String>> = if acfg.spatial_groups.is_empty() {
        map.regions().map(|r| vec![r.clone()]).collect()
    } else {
        acfg.spatial_groups.clone()
    };

    for s in &prep.subjects {
        let base = match acfg.strategy {
            CellStrategy::MaskAndReuse => Some(load_checked_model(ctx, s, None, &prep)?),
            CellStrategy::Retrain => None,
        };
        let train = prep.train.subject(s);
        let test = prep.test.subject(s);
        let actx = AblationContext {
            train: &train,
            test: &test,
            embeddings: &emb,
            bank: &bank,
            encoder: &cfg.model,
            alignment: &cfg.training,
            strategy: acfg.strategy,
            base_model: base.as_ref(),
        };
        let dir = ctx.subject_dir("ablate", s);
        for &mode in &modes {
            let name = mode_name(mode);
            let grid = rec.time(&format!("{name} {s}"), |_| match mode {
                AblationMode::Spatial => spatial_ablation(&actx, &groups, &map),
                _ => temporal_ablation(&actx, mode, acfg.step_ms, acfg.width_ms),
            })?;
            let done = grid.cells.iter().filter(|c| c.report.is_some()).count();
            println!("{s} {name}: {done} of {} cells evaluated", grid.cells.len());
            write_report(&dir.join(format!("{name}.tsv")), &grid.to_tsv(), &mut rec)?;
            write_report(&dir.join(format!("{name}.json")), &to_json_pretty(&grid), &mut rec)?;
            if mode != AblationMode::Spatial {
                write_report(&dir.join(format!("{name}_curve.tsv")), &curve_table(&grid), &mut rec)?;
            }
        }
    }
    manifest::record(ctx.out(), "ablate", cfg.to_json(), rec)?;
    Ok(())
}
