//! Loss terms on the autograd tape.
//!
//! L1 terms are means over elements, not sums. Teacher-side inputs to the
//! distillation losses are detached here, so no gradient can reach the
//! teacher even if the caller recorded it with gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{param, Error, Result};
use crate::graphs::{InterGraphVars, IntraGraphVars};

/// Weights of the alignment regularizer (`lambda_msan`) and of the
/// distillation objective (`alpha`, `beta`, `gamma`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_msan: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_msan: 0.5,
            alpha: 100.0,
            beta: 100.0,
            gamma: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_msan", self.lambda_msan),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(param(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn l1_loss(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    t.mean_abs_diff(a, b)
}

/// Mean binary cross-entropy of a prediction map against a binary mask.
pub fn ce_loss(t: &mut Tape, prediction: Var, mask: Var) -> Result<Var> {
    if t.value(mask).data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(param("ce_loss expects a binary mask"));
    }
    t.bce(prediction, mask)
}

/// `KL(softmax(target) ‖ softmax(approx))`.
pub fn kl_div(t: &mut Tape, target: Var, approx: Var) -> Result<Var> {
    if t.shape(target) != t.shape(approx) {
        return Err(param(format!(
            "kl_div width mismatch: {:?} vs {:?}",
            t.shape(target),
            t.shape(approx)
        )));
    }
    t.kl_softmax(target, approx)
}

/// `l1(F, F̂) + λ·l1(S_Y, S)`.
pub fn msan_loss(t: &mut Tape, f: Var, f_hat: Var, s: Var, s_y: Var, lambda: f64) -> Result<Var> {
    let rec = l1_loss(t, f, f_hat)?;
    let regu = l1_loss(t, s_y, s)?;
    let regu = t.scale(regu, lambda);
    t.add(rec, regu)
}

fn mean_of(t: &mut Tape, terms: &[Var]) -> Result<Var> {
    let s = t.add_all(terms)?;
    Ok(t.scale(s, 1.0 / terms.len() as f64))
}

/// Node term (mean over the K+1 node pairs) plus edge term.
pub fn intra_loss(t: &mut Tape, g_t: &IntraGraphVars, g_s: &IntraGraphVars) -> Result<Var> {
    if g_t.aug_nodes.len() != g_s.aug_nodes.len() || t.shape(g_t.anchor_node) != t.shape(g_s.anchor_node) {
        return Err(param(format!(
            "intra_loss graph mismatch: K {} vs {}, node {:?} vs {:?}",
            g_t.aug_nodes.len(),
            g_s.aug_nodes.len(),
            t.shape(g_t.anchor_node),
            t.shape(g_s.anchor_node)
        )));
    }
    let mut nodes = Vec::with_capacity(g_t.aug_nodes.len() + 1);
    let pairs = core::iter::once((g_t.anchor_node, g_s.anchor_node))
        .chain(g_t.aug_nodes.iter().copied().zip(g_s.aug_nodes.iter().copied()));
    for (nt, ns) in pairs {
        let nt = t.detach(nt);
        nodes.push(l1_loss(t, nt, ns)?);
    }
    let node_term = mean_of(t, &nodes)?;
    let et = t.detach(g_t.edges);
    let edge_term = l1_loss(t, et, g_s.edges)?;
    t.add(node_term, edge_term)
}

/// Mean per-node KL (teacher as target) plus edge term.
pub fn inter_loss(t: &mut Tape, g_t: &InterGraphVars, g_s: &InterGraphVars) -> Result<Var> {
    if g_t.nodes.len() != g_s.nodes.len() || t.shape(g_t.nodes[0]) != t.shape(g_s.nodes[0]) {
        return Err(param(format!(
            "inter_loss graph mismatch: K {} vs {}, width {:?} vs {:?}",
            g_t.nodes.len(),
            g_s.nodes.len(),
            t.shape(g_t.nodes[0]),
            t.shape(g_s.nodes[0])
        )));
    }
    let mut kls = Vec::with_capacity(g_t.nodes.len());
    for (&nt, &ns) in g_t.nodes.iter().zip(&g_s.nodes) {
        let nt = t.detach(nt);
        kls.push(kl_div(t, nt, ns)?);
    }
    let node_term = mean_of(t, &kls)?;
    let et = t.detach(g_t.edges);
    let edge_term = l1_loss(t, et, g_s.edges)?;
    t.add(node_term, edge_term)
}

/// `l1(Y_T, Yrec_T) + l1(Y_T, Yrec_S)`; both terms target the teacher's
/// own prediction.
pub fn dicd_loss(t: &mut Tape, y_t: Var, yrec_t: Var, yrec_s: Var) -> Result<Var> {
    let y = t.detach(y_t);
    let a = l1_loss(t, y, yrec_t)?;
    let b = l1_loss(t, y, yrec_s)?;
    t.add(a, b)
}

/// Plain-value total: `ce + α·intra + β·inter + γ·dicd`.
pub fn total_loss_value(ce: f64, intra: f64, inter: f64, dicd: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("ce", ce), ("intra", intra), ("inter", inter), ("dicd", dicd)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is not finite ({v})")));
        }
    }
    Ok(ce + w.alpha * intra + w.beta * inter + w.gamma * dicd)
}

/// Tape total. Absent terms (ablations) contribute nothing.
pub fn total_loss(
    t: &mut Tape,
    ce: Var,
    intra: Option<Var>,
    inter: Option<Var>,
    dicd: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let value = |t: &Tape, v: Option<Var>| v.map_or(0.0, |v| t.value(v).item());
    total_loss_value(t.value(ce).item(), value(t, intra), value(t, inter), value(t, dicd), w)?;
    let mut terms = alloc::vec![ce];
    for (v, k) in [(intra, w.alpha), (inter, w.beta), (dicd, w.gamma)] {
        if let Some(v) = v {
            terms.push(t.scale(v, k));
        }
    }
    t.add_all(&terms)
}
