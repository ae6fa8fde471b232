//! Detection losses over per-anchor head outputs.

use serde::{Deserialize, Serialize};

use crate::autograd::{bce_with_logits, smooth_l1, Graph, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the classification term.
    pub alpha: f64,
    /// Weight of the normalized regression term.
    pub beta: f64,
    /// Weight of the mean positive BCE.
    pub gamma_pos: f64,
    /// Weight of the mean negative BCE.
    pub gamma_neg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            gamma_pos: 1.5,
            gamma_neg: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls_loss: f64,
    /// Regression loss already divided by `n_pos` (0 without positives).
    pub reg_loss: f64,
    pub total: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Taped loss terms for one scene.
#[derive(Clone, Copy, Debug)]
pub struct SceneLoss {
    pub cls: Var,
    pub reg: Var,
    pub total: Var,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl SceneLoss {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown {
            cls_loss: v(self.cls),
            reg_loss: v(self.reg),
            total: v(self.total),
            n_pos: self.n_pos,
            n_neg: self.n_neg,
        }
    }
}

/// `gamma_pos * mean BCE(pos, 1) + gamma_neg * mean BCE(neg, 0)`; an empty
/// set contributes 0.
pub fn classification_loss(g: &mut Graph, pos: Var, neg: Var, w: &LossWeights) -> Result<Var> {
    if g.value(pos).numel() == 0 {
        log::debug!("classification loss without positive anchors");
    }
    let lp = g.bce_with_logits_mean(pos, 1.0)?;
    let ln = g.bce_with_logits_mean(neg, 0.0)?;
    let lp = g.scale(lp, w.gamma_pos)?;
    let ln = g.scale(ln, w.gamma_neg)?;
    g.add(lp, ln)
}

/// Smooth-L1 summed over components and positives, divided by `n_pos`.
pub fn regression_loss(g: &mut Graph, pred: Var, target: &[f64], n_pos: usize) -> Result<Var> {
    let s = g.smooth_l1_sum(pred, target)?;
    g.scale(s, if n_pos == 0 { 0.0 } else { 1.0 / n_pos as f64 })
}

/// Assembles the weighted total from the two terms.
pub fn total_loss(g: &mut Graph, cls: Var, reg: Var, w: &LossWeights) -> Result<Var> {
    let a = g.scale(cls, w.alpha)?;
    let b = g.scale(reg, w.beta)?;
    g.add(a, b)
}

/// Scalar recomputation of the full loss from raw logits and residuals.
pub fn reference_loss(
    pos_logits: &[f64],
    neg_logits: &[f64],
    pred: &[[f64; 7]],
    target: &[[f64; 7]],
    w: &LossWeights,
) -> LossBreakdown {
    let mean = |v: &[f64], t: f64| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|&z| bce_with_logits(z, t)).sum::<f64>() / v.len() as f64
        }
    };
    let cls = w.gamma_pos * mean(pos_logits, 1.0) + w.gamma_neg * mean(neg_logits, 0.0);
    let n_pos = pos_logits.len();
    let sum: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| smooth_l1(a - b)))
        .sum();
    let reg = if n_pos == 0 { 0.0 } else { sum / n_pos as f64 };
    LossBreakdown {
        cls_loss: cls,
        reg_loss: reg,
        total: w.alpha * cls + w.beta * reg,
        n_pos,
        n_neg: neg_logits.len(),
    }
}
