//! Task losses, expressed as graph computations so they differentiate for free.

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Clamp applied before taking logs of box coordinates.
pub const LOG_L1_EPS: f64 = 1e-4;

/// Which loss pairs with which head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskLoss {
    LogL1,
    SoftmaxCe,
    PixelBce,
}

/// Ground truth in the form the matching loss consumes.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// `(n, 4)` boxes as image fractions.
    Boxes(Tensor),
    Labels(Vec<usize>),
    /// `(n, 1, h, w)` binary masks.
    Masks(Tensor),
}

impl TaskLoss {
    pub fn apply(self, g: &mut Graph, pred: Var, target: &Target) -> Result<Var> {
        match (self, target) {
            (TaskLoss::LogL1, Target::Boxes(t)) => log_l1_loss(g, pred, t),
            (TaskLoss::SoftmaxCe, Target::Labels(l)) => softmax_ce_loss(g, pred, l),
            (TaskLoss::PixelBce, Target::Masks(m)) => pixel_bce_loss(g, pred, m),
            (loss, t) => Err(invalid(format!(
                "{loss:?} cannot score a {} target",
                match t {
                    Target::Boxes(_) => "box",
                    Target::Labels(_) => "label",
                    Target::Masks(_) => "mask",
                }
            ))),
        }
    }
}

/// `sum_i |ln p_i - ln t_i|` per box after clamping to `[eps, 1 - eps]`,
/// averaged over the batch. `pred` and `target` are `(n, 4)`.
pub fn log_l1_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "log_l1_loss",
            detail: format!("pred {:?} vs target {:?}", g.shape(pred), target.shape()),
        });
    }
    if !target.is_finite() {
        return Err(invalid("log_l1_loss: non-finite target"));
    }
    let batch = target.shape().first().copied().unwrap_or(1);
    let log_t = target.map(|v| v.clamp(LOG_L1_EPS, 1.0 - LOG_L1_EPS).ln());
    let log_t = g.constant(log_t);
    let p = g.clamp(pred, LOG_L1_EPS, 1.0 - LOG_L1_EPS)?;
    let lp = g.log(p)?;
    let d = g.sub(lp, log_t)?;
    let a = g.abs(d)?;
    let s = g.sum(a)?;
    g.scale(s, 1.0 / batch as f64)
}

/// Mean of `-ln softmax(logits)[label]` over the batch. `logits` is `(n, c)`.
pub fn softmax_ce_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "softmax_ce_loss",
            detail: format!("logits {shape:?} for {} labels", labels.len()),
        });
    }
    let c = shape[1];
    if c < 2 {
        return Err(invalid("softmax_ce_loss: need at least 2 classes"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(invalid(format!("label {bad} out of range for {c} classes")));
    }
    let mut onehot = Tensor::zeros([labels.len(), c]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * c + l] = 1.0;
    }
    let onehot = g.constant(onehot);
    let ls = g.log_softmax(logits)?;
    let picked = g.mul(ls, onehot)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0 / labels.len() as f64)
}

/// Mean binary cross-entropy with logits, `softplus(l) - y * l`, over every pixel.
pub fn pixel_bce_loss(g: &mut Graph, logits: Var, target: &Tensor) -> Result<Var> {
    if g.shape(logits) != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "pixel_bce_loss",
            detail: format!("logits {:?} vs target {:?}", g.shape(logits), target.shape()),
        });
    }
    if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("pixel_bce_loss: target values must be 0 or 1"));
    }
    let y = g.constant(target.clone());
    let sp = g.softplus(logits)?;
    let yl = g.mul(y, logits)?;
    let d = g.sub(sp, yl)?;
    g.mean(d)
}
