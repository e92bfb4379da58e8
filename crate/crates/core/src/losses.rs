//! Training objectives: supervised BCE and Dice losses, hard pseudo-label
//! construction from teacher probabilities, the weak-to-strong consistency
//! loss over unlabeled batches, and the combined total.
//!
//! Teacher predictions enter as plain [`Tensor`]s, never as graph [`Var`]s,
//! so the stop-gradient contract is enforced by the type system: there is no
//! node through which a gradient could flow back into the teacher.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("{0}")]
    Batch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Which supervised objective to apply to labeled items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupKind {
    #[serde(rename = "bce")]
    Bce,
    #[serde(rename = "dice")]
    Dice,
    #[serde(rename = "bce+dice")]
    BceDice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub sup_kind: SupKind,
    /// Weight on the unsupervised consistency term.
    pub lambda: f32,
    /// Teacher probability at or above this becomes pseudo-label 1.
    pub pseudo_threshold: f32,
    /// Pixels where max(p, 1-p) falls below this are excluded from the
    /// consistency loss. Zero keeps every pixel.
    pub confidence_floor: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sup_kind: SupKind::Bce,
            lambda: 0.5,
            pseudo_threshold: 0.5,
            confidence_floor: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(LossError::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold < 1.0) {
            return Err(LossError::Config(format!(
                "pseudo_threshold must lie in (0,1), got {}",
                self.pseudo_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.confidence_floor) {
            return Err(LossError::Config(format!(
                "confidence_floor must lie in [0,1), got {}",
                self.confidence_floor
            )));
        }
        Ok(())
    }
}

/// Lifts an `[H,W]` target to `[1,H,W]` when the prediction carries a leading
/// channel axis, so callers can pass dataset masks against in-graph outputs.
fn align_target(pred_shape: &[usize], target: &Tensor) -> Result<Tensor> {
    if target.shape() == pred_shape {
        return Ok(target.clone());
    }
    if pred_shape.len() == 3 && pred_shape[0] == 1 && target.shape() == &pred_shape[1..] {
        return Ok(Tensor::new(pred_shape.to_vec(), target.data().to_vec())?);
    }
    Err(LossError::Tensor(TensorError::Shape(format!(
        "target shape {:?} does not match prediction {:?}",
        target.shape(),
        pred_shape
    ))))
}

/// Pixel-averaged binary cross-entropy between a predicted probability map
/// and a binary target. Probabilities are clamped to [1e-7, 1-1e-7].
pub fn bce_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let target = align_target(&g.value(pred).shape().to_vec(), target)?;
    Ok(g.bce_loss(pred, &target, None)?)
}

/// Dice loss `1 - 2*sum(p*y) / (sum(p) + sum(y) + 1e-7)`.
pub fn dice_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let target = align_target(&g.value(pred).shape().to_vec(), target)?;
    Ok(g.dice_loss(pred, &target)?)
}

/// Supervised loss for a single labeled item under `cfg.sup_kind`.
/// `bce+dice` is the plain sum of the two terms.
pub fn sup_loss(g: &mut Graph, pred: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
    match cfg.sup_kind {
        SupKind::Bce => bce_loss(g, pred, target),
        SupKind::Dice => dice_loss(g, pred, target),
        SupKind::BceDice => {
            let b = bce_loss(g, pred, target)?;
            let d = dice_loss(g, pred, target)?;
            Ok(g.add(b, d)?)
        }
    }
}

/// Hard pseudo-label and validity mask from a detached teacher probability
/// map. `pseudo = [p >= threshold]` (ties included), `valid = [max(p, 1-p) >=
/// confidence_floor]`; with a zero floor every pixel is valid.
pub fn make_pseudo_label(p_w: &Tensor, cfg: &LossConfig) -> (Tensor, Tensor) {
    let pseudo: Vec<f32> = p_w
        .data()
        .iter()
        .map(|&p| if p >= cfg.pseudo_threshold { 1.0 } else { 0.0 })
        .collect();
    let valid: Vec<f32> = p_w
        .data()
        .iter()
        .map(|&p| {
            if p.max(1.0 - p) >= cfg.confidence_floor {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let shape = p_w.shape().to_vec();
    (
        Tensor::new(shape.clone(), pseudo).expect("shape preserved"),
        Tensor::new(shape, valid).expect("shape preserved"),
    )
}

/// Consistency loss over a batch of unlabeled items: the mean over items of
/// BCE between the hard pseudo-label drawn from the teacher's probabilities
/// (already expressed in the strong view's geometry) and the student's
/// strong-view prediction, restricted to confident pixels. Items with no
/// valid pixels contribute 0; an empty batch yields a constant 0.
pub fn unsup_loss(
    g: &mut Graph,
    p_w_batch: &[Tensor],
    p_s_batch: &[Var],
    cfg: &LossConfig,
) -> Result<Var> {
    if p_w_batch.len() != p_s_batch.len() {
        return Err(LossError::Batch(format!(
            "teacher batch has {} items but student batch has {}",
            p_w_batch.len(),
            p_s_batch.len()
        )));
    }
    if p_s_batch.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut acc: Option<Var> = None;
    for (p_w, &p_s) in p_w_batch.iter().zip(p_s_batch) {
        let (pseudo, valid) = make_pseudo_label(p_w, cfg);
        let pred_shape = g.value(p_s).shape().to_vec();
        let pseudo = align_target(&pred_shape, &pseudo)?;
        let valid = align_target(&pred_shape, &valid)?;
        let item = g.bce_loss(p_s, &pseudo, Some(&valid))?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, item)?,
            None => item,
        });
    }
    let sum = acc.expect("batch checked non-empty");
    let inv = g.constant(Tensor::scalar(1.0 / p_s_batch.len() as f32));
    Ok(g.mul(inv, sum)?)
}

/// Combined objective `l_sup + lambda * l_unsup`, composed in-graph so one
/// backward pass distributes both gradients.
pub fn total_loss(g: &mut Graph, l_sup: Var, l_unsup: Var, lambda: f32) -> Result<Var> {
    let lam = g.constant(Tensor::scalar(lambda));
    let scaled = g.mul(lam, l_unsup)?;
    Ok(g.add(l_sup, scaled)?)
}
