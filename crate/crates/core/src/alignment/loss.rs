//! Contrastive and regression objectives, in plain `f64` form for
//! evaluation and as graph builders for training.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Which text targets supervise the semantic head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextGranularity {
    #[default]
    Both,
    CoarseOnly,
    FineOnly,
}

/// Which loss families enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerms {
    #[default]
    Both,
    ContrastiveOnly,
    MseOnly,
}

/// Which branches are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tasks {
    #[default]
    Both,
    VisualOnly,
    SemanticOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub text: TextGranularity,
    pub terms: LossTerms,
    pub tasks: Tasks,
}

impl LossConfig {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            text: TextGranularity::Both,
            terms: LossTerms::Both,
            tasks: Tasks::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clip_v: f64,
    pub clip_t1: f64,
    pub clip_t2: f64,
    pub clip_t: f64,
    pub mse_v: f64,
    pub mse_t: f64,
    pub total: f64,
}

fn row_norms(x: ArrayView2<f64>) -> Vec<f64> {
    x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

fn check_pair(a: ArrayView2<f64>, t: ArrayView2<f64>) -> Result<()> {
    if a.dim() != t.dim() {
        return Err(Error::Shape(format!("anchors {:?} vs targets {:?}", a.dim(), t.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

/// Row-normalised copy; zero rows are rejected.
pub fn normalize_rows(x: ArrayView2<f64>, what: &str) -> Result<Array2<f64>> {
    let norms = row_norms(x);
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::Degenerate(format!("{what} row {i} has zero or non-finite norm")));
    }
    let mut out = x.to_owned();
    for (mut row, n) in out.rows_mut().into_iter().zip(norms) {
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

/// `B × B` cosine similarities `s(a_i, t_j)`.
pub fn cosine_matrix(a: ArrayView2<f64>, t: ArrayView2<f64>) -> Result<Array2<f64>> {
    let an = normalize_rows(a, "anchor")?;
    let tn = normalize_rows(t, "target")?;
    Ok(an.dot(&tn.t()))
}

/// One-directional InfoNCE: `-(1/B) Σ_i log softmax_j(s(a_i, t_j)/τ)[i]`,
/// the softmax running over targets.
pub fn contrastive_loss(anchors: ArrayView2<f64>, targets: ArrayView2<f64>, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    check_pair(anchors, targets)?;
    let s = cosine_matrix(anchors, targets)?;
    let b = s.nrows();
    let mut total = 0.0;
    for (i, row) in s.rows().into_iter().enumerate() {
        let logits: Vec<f64> = row.iter().map(|v| v / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    Ok(total / b as f64)
}

/// `(clip_t1, clip_t2, clip_t)` with `clip_t` the mean of the first two.
pub fn clip_text_loss(
    zs: ArrayView2<f64>,
    zc: ArrayView2<f64>,
    zt: ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, f64, f64)> {
    let t1 = contrastive_loss(zs, zc, tau)?;
    let t2 = contrastive_loss(zs, zt, tau)?;
    Ok((t1, t2, (t1 + t2) / 2.0))
}

fn sq_dist_sum(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(1/(B·d)) Σ_i ‖z_v − ẑ_v‖²`.
pub fn mse_loss_visual(zv_hat: ArrayView2<f64>, zv: ArrayView2<f64>) -> Result<f64> {
    check_pair(zv_hat, zv)?;
    Ok(sq_dist_sum(zv_hat, zv) / zv.len() as f64)
}

/// `(1/(B·d)) Σ_i (‖z_c − ẑ_s‖² + ‖z_t − ẑ_s‖²)/2`.
pub fn mse_loss_text(zs_hat: ArrayView2<f64>, zc: ArrayView2<f64>, zt: ArrayView2<f64>) -> Result<f64> {
    check_pair(zs_hat, zc)?;
    check_pair(zs_hat, zt)?;
    Ok((sq_dist_sum(zs_hat, zc) + sq_dist_sum(zs_hat, zt)) / 2.0 / zc.len() as f64)
}

/// `α(L_clipV + β·L_mseV) + (1 − α)(L_clipT + β·L_mseT)`.
pub fn overall_loss(clip_v: f64, clip_t: f64, mse_v: f64, mse_t: f64, alpha: f64, beta: f64) -> f64 {
    alpha * (clip_v + beta * mse_v) + (1.0 - alpha) * (clip_t + beta * mse_t)
}

impl LossConfig {
    /// The four parts after the ablation switches: disabled terms become 0.
    pub fn effective(&self, b: &LossBreakdown) -> (f64, f64, f64, f64) {
        let (mut cv, mut ct, mut mv, mut mt) = (b.clip_v, b.clip_t, b.mse_v, b.mse_t);
        match self.terms {
            LossTerms::Both => {}
            LossTerms::ContrastiveOnly => (mv, mt) = (0.0, 0.0),
            LossTerms::MseOnly => (cv, ct) = (0.0, 0.0),
        }
        match self.tasks {
            Tasks::Both => {}
            Tasks::VisualOnly => (ct, mt) = (0.0, 0.0),
            Tasks::SemanticOnly => (cv, mv) = (0.0, 0.0),
        }
        (cv, ct, mv, mt)
    }

    /// Weight of the visual branch after task switches.
    pub fn alpha_eff(&self) -> f64 {
        match self.tasks {
            Tasks::Both => self.alpha,
            Tasks::VisualOnly => 1.0,
            Tasks::SemanticOnly => 0.0,
        }
    }

    pub fn total(&self, b: &LossBreakdown) -> f64 {
        let (cv, ct, mv, mt) = self.effective(b);
        overall_loss(cv, ct, mv, mt, self.alpha_eff(), self.beta)
    }
}

/// Loss values computed from fixed embeddings.
pub fn loss_breakdown(
    zv_hat: ArrayView2<f64>,
    zs_hat: ArrayView2<f64>,
    zv: ArrayView2<f64>,
    zc: ArrayView2<f64>,
    zt: ArrayView2<f64>,
    tau: f64,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let clip_v = contrastive_loss(zv_hat, zv, tau)?;
    let (clip_t1, clip_t2, both) = clip_text_loss(zs_hat, zc, zt, tau)?;
    let clip_t = match cfg.text {
        TextGranularity::Both => both,
        TextGranularity::CoarseOnly => clip_t1,
        TextGranularity::FineOnly => clip_t2,
    };
    let mse_v = mse_loss_visual(zv_hat, zv)?;
    let mse_t = match cfg.text {
        TextGranularity::Both => mse_loss_text(zs_hat, zc, zt)?,
        TextGranularity::CoarseOnly => mse_loss_visual(zs_hat, zc)?,
        TextGranularity::FineOnly => mse_loss_visual(zs_hat, zt)?,
    };
    let mut b = LossBreakdown {
        clip_v,
        clip_t1,
        clip_t2,
        clip_t,
        mse_v,
        mse_t,
        total: 0.0,
    };
    b.total = cfg.total(&b);
    Ok(b)
}

/// Graph nodes of every loss part.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub clip_v: Var,
    pub clip_t1: Var,
    pub clip_t2: Var,
    pub mse_v: Var,
    pub mse_t_coarse: Var,
    pub mse_t_fine: Var,
    pub total: Var,
}

/// InfoNCE node with temperature `exp(log_tau)`.
pub fn contrastive_graph(g: &mut Graph, anchors: Var, targets: Var, log_tau: Var) -> Var {
    let b = g.shape(anchors).0;
    let a = g.normalize_rows(anchors);
    let t = g.normalize_rows(targets);
    let s = g.matmul_nt(a, t);
    let neg = g.scale(log_tau, -1.0);
    let inv_tau = g.exp(neg);
    let logits = g.mul_scalar(s, inv_tau);
    let ls = g.log_softmax(logits);
    g.nll_mean(ls, (0..b).collect())
}

/// `Σ ‖a − t‖² / (B·d)`.
pub fn mse_graph(g: &mut Graph, pred: Var, target: Var) -> Var {
    let (b, d) = g.shape(pred);
    let diff = g.sub(pred, target);
    let sq = g.mul(diff, diff);
    let s = g.sum_all(sq);
    g.scale(s, 1.0 / (b * d) as f64)
}

/// Builds the overall objective. Terms switched off by `cfg` are still
/// built (for logging) but do not enter `total`.
pub fn loss_graph(
    g: &mut Graph,
    zv_hat: Var,
    zs_hat: Var,
    zv: Var,
    zc: Var,
    zt: Var,
    log_tau: Var,
    cfg: &LossConfig,
) -> LossVars {
    let clip_v = contrastive_graph(g, zv_hat, zv, log_tau);
    let clip_t1 = contrastive_graph(g, zs_hat, zc, log_tau);
    let clip_t2 = contrastive_graph(g, zs_hat, zt, log_tau);
    let mse_v = mse_graph(g, zv_hat, zv);
    let mse_t_coarse = mse_graph(g, zs_hat, zc);
    let mse_t_fine = mse_graph(g, zs_hat, zt);

    let (clip_t, mse_t) = match cfg.text {
        TextGranularity::Both => {
            let c = g.add(clip_t1, clip_t2);
            let m = g.add(mse_t_coarse, mse_t_fine);
            (g.scale(c, 0.5), g.scale(m, 0.5))
        }
        TextGranularity::CoarseOnly => (clip_t1, mse_t_coarse),
        TextGranularity::FineOnly => (clip_t2, mse_t_fine),
    };
    let use_clip = cfg.terms != LossTerms::MseOnly;
    let use_mse = cfg.terms != LossTerms::ContrastiveOnly;
    let alpha = cfg.alpha_eff();
    let mut terms: Vec<Var> = Vec::new();
    let mut branch = |g: &mut Graph, clip: Var, mse: Var, w: f64| {
        if w == 0.0 {
            return;
        }
        let inner = match (use_clip, use_mse) {
            (true, true) => {
                let m = g.scale(mse, cfg.beta);
                g.add(clip, m)
            }
            (true, false) => clip,
            (false, true) => g.scale(mse, cfg.beta),
            (false, false) => unreachable!("at least one loss family is enabled"),
        };
        terms.push(g.scale(inner, w));
    };
    branch(g, clip_v, mse_v, alpha);
    branch(g, clip_t, mse_t, 1.0 - alpha);
    let total = match terms.as_slice() {
        [] => g.scale(clip_v, 0.0),
        [one] => *one,
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    };
    LossVars {
        clip_v,
        clip_t1,
        clip_t2,
        mse_v,
        mse_t_coarse,
        mse_t_fine,
        total,
    }
}

impl LossVars {
    /// Reads the part values; `total` is recomputed from the parts with
    /// [`overall_loss`].
    pub fn breakdown(&self, g: &Graph, cfg: &LossConfig) -> LossBreakdown {
        let clip_t1 = g.scalar(self.clip_t1);
        let clip_t2 = g.scalar(self.clip_t2);
        let (mc, mf) = (g.scalar(self.mse_t_coarse), g.scalar(self.mse_t_fine));
        let (clip_t, mse_t) = match cfg.text {
            TextGranularity::Both => ((clip_t1 + clip_t2) / 2.0, (mc + mf) / 2.0),
            TextGranularity::CoarseOnly => (clip_t1, mc),
            TextGranularity::FineOnly => (clip_t2, mf),
        };
        let mut b = LossBreakdown {
            clip_v: g.scalar(self.clip_v),
            clip_t1,
            clip_t2,
            clip_t,
            mse_v: g.scalar(self.mse_v),
            mse_t,
            total: 0.0,
        };
        b.total = cfg.total(&b);
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_pair_has_zero_loss() {
        let a = array![[0.3, -0.2]];
        assert_eq!(contrastive_loss(a.view(), array![[1.0, 5.0]].view(), 0.07).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_pair() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let l = contrastive_loss(e.view(), e.view(), 1.0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_targets_give_ln_b() {
        let a = array![[1.0, 2.0], [-0.5, 0.1], [0.3, 0.3]];
        let t = array![[0.2, 0.7], [0.2, 0.7], [0.2, 0.7]];
        let l = contrastive_loss(a.view(), t.view(), 0.07).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let z = array![[0.0, 0.0], [1.0, 0.0]];
        assert!(matches!(contrastive_loss(z.view(), z.view(), 1.0), Err(Error::Degenerate(_))));
        let e = array![[1.0, 0.0]];
        assert!(matches!(contrastive_loss(e.view(), e.view(), 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn mse_hand_values() {
        let l = mse_loss_visual(array![[0.0, 0.0]].view(), array![[1.0, 0.0]].view()).unwrap();
        assert_eq!(l, 0.5);
        let z = array![[0.4, -1.0]];
        assert_eq!(mse_loss_text(z.view(), z.view(), z.view()).unwrap(), 0.0);
    }

    #[test]
    fn overall_loss_composition() {
        assert_eq!(overall_loss(1.0, 1.0, 1.0, 1.0, 0.5, 2.0), 3.0);
        assert_eq!(overall_loss(0.4, 7.0, 0.2, 9.0, 1.0, 2.0), 0.4 + 2.0 * 0.2);
    }

    #[test]
    fn graph_matches_plain_losses() {
        let zv_hat = array![[0.3, -1.0, 0.2], [1.1, 0.4, -0.3], [-0.2, 0.5, 0.9]];
        let zs_hat = array![[0.1, 0.2, 0.3], [-0.4, 0.9, 0.0], [0.7, -0.7, 0.2]];
        let zv = array![[1.0, 0.0, 0.2], [0.0, 1.0, 0.0], [0.3, 0.3, 1.0]];
        let zc = array![[0.5, 0.1, 0.0], [0.2, -1.0, 0.3], [0.0, 0.0, 1.0]];
        let zt = array![[0.9, 0.1, 0.1], [0.1, -0.8, 0.5], [-0.1, 0.2, 1.0]];
        let tau = 0.3f64;
        for text in [TextGranularity::Both, TextGranularity::CoarseOnly, TextGranularity::FineOnly] {
            let cfg = LossConfig { text, ..LossConfig::new(0.5, 2.0) };
            let plain = loss_breakdown(zv_hat.view(), zs_hat.view(), zv.view(), zc.view(), zt.view(), tau, &cfg).unwrap();
            let mut g = Graph::new();
            let vars = [&zv_hat, &zs_hat, &zv, &zc, &zt].map(|m| g.constant(m.clone()));
            let lt = g.constant(array![[tau.ln()]]);
            let lv = loss_graph(&mut g, vars[0], vars[1], vars[2], vars[3], vars[4], lt, &cfg);
            let b = lv.breakdown(&g, &cfg);
            for (x, y) in [
                (plain.clip_v, b.clip_v),
                (plain.clip_t, b.clip_t),
                (plain.mse_v, b.mse_v),
                (plain.mse_t, b.mse_t),
                (plain.total, b.total),
                (plain.total, g.scalar(lv.total)),
            ] {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }
}
