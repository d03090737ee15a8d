use std::path::Path;

use neuralign::alignment::{initial_state, split_validation, train as run_training, LogRecord, TrainEvent, TrainState};
use neuralign::embed::CatalogEmbeddings;
use neuralign::params::write_atomic;
use neuralign::{Error, Result};

use super::{prepare, Ctx, Provenance, BEST_MODEL, PROVENANCE_FILE, STATE_FILE};
use crate::manifest::{self, CommandRecord};
use crate::CliResult;

const LOG_FILE: &str = "log.jsonl";

fn record_epoch(r: &LogRecord) -> usize {
    match r {
        LogRecord::Step(s) => s.epoch,
        LogRecord::Epoch(e) => e.epoch,
    }
}

/// Log lines of epochs before `epochs`, as written.
fn kept_log(path: &Path, epochs: usize) -> Result<String> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(String::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = String::new();
    for line in text.lines() {
        let r: LogRecord =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if record_epoch(&r) < epochs {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn line(r: &LogRecord) -> String {
    serde_json::to_string(r).expect("log record serializes") + "\n"
}

pub fn train(ctx: &Ctx, resume: bool, halt_after: Option<usize>) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let mut rec = CommandRecord::default();
    let prep = prepare(cfg, &mut rec)?;
    let emb = CatalogEmbeddings::build(&prep.train.catalog, &prep.providers)?;
    for s in &prep.subjects {
        let dir = ctx.subject_dir("train", s);
        std::fs::create_dir_all(&dir)?;
        let state_path = dir.join(STATE_FILE);
        let log_path = dir.join(LOG_FILE);
        let set = prep.train.subject(s);
        let (tr, va) = split_validation(&set, cfg.training.val_count, cfg.training.seed)?;
        let fresh = initial_state(&set, &cfg.model, &cfg.training)?;
        let mut state = if resume && state_path.exists() {
            let st = TrainState::load(&state_path)?;
            if st.model.config != fresh.model.config || st.seed != fresh.seed {
                return Err(Error::Config(format!(
                    "checkpoint {} was written under a different model configuration or seed",
                    state_path.display()
                ))
                .into());
            }
            st
        } else {
            if state_path.exists() && !ctx.force {
                return Err(Error::Config(format!(
                    "{} exists; pass --resume to continue or --force to start over",
                    state_path.display()
                ))
                .into());
            }
            fresh
        };
        let mut log_text = if resume { kept_log(&log_path, state.epoch)? } else { String::new() };
        let start_epoch = state.epoch;

        rec.time(&format!("train {s}"), |_| {
            let mut on_event = |ev: TrainEvent| -> Result<()> {
                match ev {
                    TrainEvent::Step(r) => log_text.push_str(&line(&LogRecord::Step(r.clone()))),
                    TrainEvent::Epoch(r, st) => {
                        log_text.push_str(&line(&LogRecord::Epoch(r.clone())));
                        write_atomic(&log_path, log_text.as_bytes())?;
                        st.save(&state_path)?;
                        log::info!("{s} epoch {}: loss {:.5} val top-1 {:.4}", r.epoch, r.mean_total, r.val_top1);
                    }
                }
                Ok(())
            };
            run_training(&mut state, &tr, &va, &emb, &cfg.training, halt_after, &mut on_event)
        })?;
        if state.epoch == start_epoch {
            state.save(&state_path)?;
            write_atomic(&log_path, log_text.as_bytes())?;
        }
        rec.checkpoint(&state_path);
        rec.report(&log_path);

        if state.epoch < cfg.training.epochs {
            println!("{s}: halted after epoch {} of {}", state.epoch, cfg.training.epochs);
            continue;
        }
        let best = state.best_model();
        let best_path = dir.join(BEST_MODEL);
        best.save(&best_path)?;
        Provenance {
            providers: prep.providers.fingerprint(),
            encoder: best.config.clone(),
            model: best.fingerprint(),
        }
        .write(&dir.join(PROVENANCE_FILE))?;
        rec.checkpoint(&best_path);
        rec.fingerprints.insert(format!("alignment {s}"), best.fingerprint());
        match state.best_epoch {
            Some(e) => println!(
                "{s}: {} epochs, best epoch {e} with validation top-1 {:.2}%",
                state.epoch,
                100.0 * state.best_metric
            ),
            None => println!("{s}: no epochs run; the initial model is kept"),
        }
    }
    manifest::record(ctx.out(), "train", cfg.to_json(), rec)?;
    Ok(())
}
