//! Central finite-difference verification of graph gradients.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::params::{seeded_rng, ParamSet};

pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Largest relative error per parameter tensor.
    pub per_tensor: BTreeMap<String, f64>,
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.per_tensor.extend(other.per_tensor);
    }

    pub fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            checked: 0,
            per_tensor: BTreeMap::new(),
            worst: None,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `loss` with central differences on up
/// to `probes` randomly chosen entries of every tensor in `params`.
pub fn check_gradients(
    params: &ParamSet,
    probes: usize,
    step: f64,
    seed: u64,
    loss: impl Fn(&mut Graph, &ParamSet) -> Var,
) -> GradCheckReport {
    let mut g = Graph::new();
    let out = loss(&mut g, params);
    let grads = g.backward(out);
    let analytic = g.param_grads(&grads);
    let eval = |p: &ParamSet| {
        let mut g = Graph::new();
        let o = loss(&mut g, p);
        g.scalar(o)
    };
    let mut rng = seeded_rng(seed, 0);
    let mut report = GradCheckReport::empty();
    for (name, tensor) in params.iter() {
        let n = tensor.len();
        let picks: Vec<usize> = if n <= probes {
            (0..n).collect()
        } else {
            (0..probes).map(|_| rng.random_range(0..n)).collect()
        };
        let mut worst = 0.0f64;
        for idx in picks {
            let a = analytic
                .get(name)
                .map(|g| g.as_slice().expect("standard layout")[idx])
                .unwrap_or(0.0);
            let mut p = params.clone();
            let t = p.get_mut(name).expect("present");
            let slot = &mut t.as_slice_mut().expect("standard layout")[idx];
            let x0 = *slot;
            *slot = x0 + step;
            let up = eval(&p);
            let t = p.get_mut(name).expect("present");
            t.as_slice_mut().expect("standard layout")[idx] = x0 - step;
            let down = eval(&p);
            let num = (up - down) / (2.0 * step);
            let err = relative_error(a, num);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
            worst = worst.max(err);
        }
        report.per_tensor.insert(name.clone(), worst);
    }
    report
}
