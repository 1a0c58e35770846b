//! Segmentation, heading and classification losses built from graph ops,
//! so they differentiate like any other layer.

use mtuc_tensor::{Graph, Tensor, Var};

use super::net::{LossWeights, ModelOutputs};
use crate::error::{Error, Result};

/// Probability clamp inside the logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Lane-pixel counts behind the two class-balance weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBalance {
    pub positives: usize,
    pub negatives: usize,
}

impl PixelBalance {
    /// One of the two weights vanishes.
    pub fn is_degenerate(&self) -> bool {
        self.positives == 0 || self.negatives == 0
    }
}

/// Class-balanced cross entropy on per-pixel sigmoid outputs. Positives
/// are weighted by N/(P+N) and negatives by P/(P+N), where P and N count
/// mask ones and zeros over the whole batch. The result is a sum over
/// pixels, not a mean.
pub fn seg_loss(g: &mut Graph, seg_logits: Var, mask: &Tensor) -> Result<(Var, PixelBalance)> {
    if g.shape(seg_logits) != mask.shape() {
        return Err(Error::Config(format!(
            "mask shape {:?} does not match logits {:?}",
            mask.shape(),
            g.shape(seg_logits)
        )));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Label("mask values must be 0 or 1".into()));
    }
    let total = mask.len();
    if total == 0 {
        return Err(Error::Label("empty mask".into()));
    }
    let positives = mask.data().iter().filter(|&&m| m == 1.0).count();
    let negatives = total - positives;
    let (wp, wn) = (negatives as f64 / total as f64, positives as f64 / total as f64);
    let pos_w = mask.map(|m| m * wp);
    let neg_w = mask.map(|m| (1.0 - m) * wn);

    let log_p = g.log_sigmoid(seg_logits, PROB_EPS)?;
    let flipped = g.scale(seg_logits, -1.0)?;
    let log_q = g.log_sigmoid(flipped, PROB_EPS)?;
    let pos = g.dot_const(log_p, &pos_w)?;
    let neg = g.dot_const(log_q, &neg_w)?;
    let sum = g.add(pos, neg)?;
    Ok((g.scale(sum, -1.0)?, PixelBalance { positives, negatives }))
}

/// Half mean squared error over M predictions.
pub fn reg_loss(g: &mut Graph, heading: Var, target: &Tensor) -> Result<Var> {
    if g.shape(heading) != target.shape() {
        return Err(Error::Config(format!(
            "target shape {:?} does not match prediction {:?}",
            target.shape(),
            g.shape(heading)
        )));
    }
    let m = g.shape(heading)[0];
    if m == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let t = g.input(target.clone());
    let diff = g.sub(heading, t)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, 0.5 / m as f64)?)
}

fn check_onehot(g: &Graph, pred: Var, onehot: &Tensor) -> Result<()> {
    if g.shape(pred) != onehot.shape() || onehot.rank() != 2 {
        return Err(Error::Config(format!(
            "targets {:?} do not match predictions {:?}",
            onehot.shape(),
            g.shape(pred)
        )));
    }
    let k = onehot.shape()[1];
    for row in onehot.data().chunks(k) {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Label(format!("target row {row:?} is not one-hot")));
        }
    }
    Ok(())
}

/// Mean over rows of -sum_j target_j * ln(prob_j), probabilities clamped
/// below at 1e-12.
pub fn cls_loss(g: &mut Graph, probs: Var, onehot: &Tensor) -> Result<Var> {
    check_onehot(g, probs, onehot)?;
    let m = onehot.shape()[0];
    let logs = g.ln_clamped(probs, PROB_EPS, 1.0)?;
    let s = g.dot_const(logs, onehot)?;
    Ok(g.scale(s, -1.0 / m as f64)?)
}

/// Per-class binary cross entropy of independent sigmoid outputs, taken
/// from the logits: mean over rows of
/// -sum_j [t_j ln p_j + (1 - t_j) ln(1 - p_j)], p clamped to [1e-12, 1 - 1e-12].
pub fn binary_cls_loss(g: &mut Graph, logits: Var, onehot: &Tensor) -> Result<Var> {
    check_onehot(g, logits, onehot)?;
    let m = onehot.shape()[0];
    let log_p = g.log_sigmoid(logits, PROB_EPS)?;
    let flipped = g.scale(logits, -1.0)?;
    let log_q = g.log_sigmoid(flipped, PROB_EPS)?;
    let pos = g.dot_const(log_p, onehot)?;
    let neg = g.dot_const(log_q, &onehot.map(|t| 1.0 - t))?;
    let s = g.add(pos, neg)?;
    Ok(g.scale(s, -1.0 / m as f64)?)
}

/// How the road-type head's sigmoid outputs are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum C1Loss {
    /// Cross entropy on the true class only, as for the softmax head.
    TrueClassOnly,
    /// Per-class binary cross entropy (also pushes wrong classes to 0).
    #[default]
    Binary,
}

/// Supervision for one batch.
#[derive(Debug, Clone)]
pub struct BatchLabels {
    /// [B, 1, H, W] in {0, 1}.
    pub mask: Tensor,
    /// [B, 1] normalized heading.
    pub heading: Tensor,
    /// [B, 3] one-hot.
    pub c1: Tensor,
    pub c2: Tensor,
}

/// Values of the four sub-losses and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub seg: f64,
    pub reg: f64,
    pub c1: f64,
    pub c2: f64,
    pub total: f64,
}

/// Weighted sum of the four losses. Terms with zero weight are still
/// evaluated for reporting but do not enter the graph of the total.
pub fn total_loss(
    g: &mut Graph,
    out: &ModelOutputs,
    labels: &BatchLabels,
    weights: &LossWeights,
    c1_loss: C1Loss,
) -> Result<(Var, LossParts, PixelBalance)> {
    let w = weights.as_array();
    if w.iter().any(|v| !(*v >= 0.0)) || w.iter().all(|&v| v == 0.0) {
        return Err(Error::Config(format!("loss weights {w:?} must be nonnegative and not all zero")));
    }
    let (seg, balance) = seg_loss(g, out.seg_logits, &labels.mask)?;
    let reg = reg_loss(g, out.heading, &labels.heading)?;
    let c1 = match c1_loss {
        C1Loss::TrueClassOnly => cls_loss(g, out.c1_probs, &labels.c1)?,
        C1Loss::Binary => binary_cls_loss(g, out.c1_logits, &labels.c1)?,
    };
    let c2 = cls_loss(g, out.c2_probs, &labels.c2)?;
    let mut total: Option<Var> = None;
    for (var, weight) in [seg, reg, c1, c2].into_iter().zip(w) {
        if weight == 0.0 {
            continue;
        }
        let term = g.scale(var, weight)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("at least one positive weight");
    let parts = LossParts {
        seg: g.value(seg).item(),
        reg: g.value(reg).item(),
        c1: g.value(c1).item(),
        c2: g.value(c2).item(),
        total: g.value(total).item(),
    };
    Ok((total, parts, balance))
}
