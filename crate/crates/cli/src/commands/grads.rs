use neuralign::alignment::reference_grad_check;
use neuralign::bridge::{prior_grad_check, qformer_grad_check};
use neuralign::gradcheck::GradCheckReport;
use neuralign::Error;

use super::{to_json_pretty, write_report, Ctx};
use crate::manifest::{self, CommandRecord};
use crate::{CliResult, Failure};

/// Central differences against reverse-mode gradients over the encoder,
/// both projectors, the temperature, the Q-Former and the prior, each on a
/// reduced-dimension batch of four.
pub fn gradient_report(seed: u64, probes: usize, step: f64) -> neuralign::Result<GradCheckReport> {
    if probes == 0 || !(step > 0.0) {
        return Err(Error::Config("check-grads needs probes ≥ 1 and a positive step".into()));
    }
    let mut report = reference_grad_check(seed, probes, step)?;
    report.merge(qformer_grad_check(seed, probes, step)?);
    report.merge(prior_grad_check(seed, probes, step)?);
    Ok(report)
}

pub fn check_grads(ctx: &Ctx, probes: usize, step: f64, tolerance: f64) -> CliResult<()> {
    let mut rec = CommandRecord::default();
    let report = rec.time("check", |_| gradient_report(ctx.cfg.seed, probes, step))?;
    for (name, err) in &report.per_tensor {
        println!("{name}\t{err:.3e}");
    }
    println!("max relative error {:.3e} over {} entries (step {step:e})", report.max_rel_error, report.checked);
    write_report(&ctx.out().join("check-grads.json"), &to_json_pretty(&report), &mut rec)?;
    manifest::record(ctx.out(), "check-grads", ctx.cfg.to_json(), rec)?;
    if report.max_rel_error < tolerance {
        Ok(())
    } else {
        Err(Failure::Gradients {
            max: report.max_rel_error,
            tolerance,
        })
    }
}
