//! The combined identity+mask objective.
//!
//! Four terms, kept separate for logging and testing: the identity
//! cross-entropy over margin-adjusted logits, the 2-way mask cross-entropy,
//! their combination `arc + ln(mask + 1)` (the log dampens the mask term),
//! and L2 weight regularization on top.

use ndarray::Array2;

use crate::model::ParamSet;
use crate::{Error, Result};

/// The four loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MTLossBreakdown {
    pub loss_arcface: f64,
    pub loss_mask: f64,
    pub loss_mtarcface: f64,
    pub loss_regularization: f64,
    pub loss_total: f64,
}

/// Mean categorical cross-entropy with a log-sum-exp stable softmax.
///
/// Safe for logits up to |x| = 1e4 without intermediate overflow. Returns
/// the loss and the softmax probabilities (needed for the gradient).
fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    assert_eq!(labels.len(), b, "labels length mismatch");
    assert!(labels.iter().all(|&y| y < c), "label out of range");

    let mut probs = Array2::<f64>::zeros((b, c));
    let mut total = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            let _ = v;
            return Err(Error::NonFiniteLoss { index: i });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[(i, j)] = e;
            sum += e;
        }
        let log_sum = sum.ln() + max;
        for j in 0..c {
            probs[(i, j)] /= sum;
        }
        total += log_sum - logits[(i, labels[i])];
    }
    let loss = total / b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { index: 0 });
    }
    Ok((loss, probs))
}

/// Gradient of mean cross-entropy w.r.t. the logits:
/// `(softmax - onehot) / B`, scaled by `upstream`.
fn cross_entropy_grad(probs: &Array2<f64>, labels: &[usize], upstream: f64) -> Array2<f64> {
    let (b, _) = probs.dim();
    let mut grad = probs.mapv(|p| p * upstream / b as f64);
    for (i, &y) in labels.iter().enumerate() {
        grad[(i, y)] -= upstream / b as f64;
    }
    grad
}

/// Identity loss: mean cross-entropy of the margin-adjusted logits.
pub fn arcface_loss(logits_arcface: &Array2<f64>, labels_id: &[usize]) -> Result<f64> {
    cross_entropy(logits_arcface, labels_id).map(|(l, _)| l)
}

/// Mask-usage loss: mean 2-way cross-entropy; the class index is the mask
/// flag (0 = unmasked, 1 = masked).
pub fn mask_loss(logits_mask: &Array2<f64>, mask_labels: &[u8]) -> Result<f64> {
    assert_eq!(logits_mask.ncols(), 2, "mask logits must have 2 columns");
    assert!(
        mask_labels.iter().all(|&f| f <= 1),
        "mask flag must be 0 or 1"
    );
    let labels: Vec<usize> = mask_labels.iter().map(|&f| f as usize).collect();
    cross_entropy(logits_mask, &labels).map(|(l, _)| l)
}

/// Combined loss: `loss_arcface + ln(loss_mask + 1)`.
pub fn mtarcface_loss(loss_arcface: f64, loss_mask: f64) -> Result<f64> {
    if !loss_arcface.is_finite() || loss_arcface < 0.0 {
        return Err(Error::InvalidLossTerm(format!(
            "loss_arcface = {loss_arcface}"
        )));
    }
    if !loss_mask.is_finite() || loss_mask < 0.0 {
        return Err(Error::InvalidLossTerm(format!("loss_mask = {loss_mask}")));
    }
    Ok(loss_arcface + (loss_mask + 1.0).ln())
}

/// L2 regularization over weight matrices (biases excluded).
pub fn regularization_loss(params: &ParamSet, weight_decay: f64) -> f64 {
    weight_decay * params.squared_weight_norm()
}

/// Assemble the full breakdown from both logit heads.
pub fn total_loss(
    logits_arcface: &Array2<f64>,
    labels_id: &[usize],
    logits_mask: &Array2<f64>,
    mask_labels: &[u8],
    params: &ParamSet,
    weight_decay: f64,
) -> Result<MTLossBreakdown> {
    if weight_decay < 0.0 {
        return Err(Error::InvalidLossTerm(format!(
            "weight_decay = {weight_decay}"
        )));
    }
    let loss_arcface = arcface_loss(logits_arcface, labels_id)?;
    let loss_mask = mask_loss(logits_mask, mask_labels)?;
    let loss_mtarcface = mtarcface_loss(loss_arcface, loss_mask)?;
    let loss_regularization = regularization_loss(params, weight_decay);
    Ok(MTLossBreakdown {
        loss_arcface,
        loss_mask,
        loss_mtarcface,
        loss_regularization,
        loss_total: loss_mtarcface + loss_regularization,
    })
}

/// Gradients of `loss_total` w.r.t. both logit arrays.
///
/// The mask branch carries the dampening factor
/// `d(mtarcface)/d(loss_mask) = 1 / (1 + loss_mask)`.
pub fn total_loss_backward(
    logits_arcface: &Array2<f64>,
    labels_id: &[usize],
    logits_mask: &Array2<f64>,
    mask_labels: &[u8],
) -> Result<(MTLossPartial, Array2<f64>, Array2<f64>)> {
    let (loss_arcface, probs_id) = cross_entropy(logits_arcface, labels_id)?;
    let labels_mask: Vec<usize> = mask_labels.iter().map(|&f| f as usize).collect();
    let (loss_mask, probs_mask) = cross_entropy(logits_mask, &labels_mask)?;

    let d_arc = cross_entropy_grad(&probs_id, labels_id, 1.0);
    let damp = 1.0 / (1.0 + loss_mask);
    let d_mask = cross_entropy_grad(&probs_mask, &labels_mask, damp);

    Ok((
        MTLossPartial {
            loss_arcface,
            loss_mask,
        },
        d_arc,
        d_mask,
    ))
}

/// The two data-dependent terms, before regularization is added.
#[derive(Debug, Clone, Copy)]
pub struct MTLossPartial {
    pub loss_arcface: f64,
    pub loss_mask: f64,
}

impl MTLossPartial {
    pub fn into_breakdown(self, params: &ParamSet, weight_decay: f64) -> Result<MTLossBreakdown> {
        let loss_mtarcface = mtarcface_loss(self.loss_arcface, self.loss_mask)?;
        let loss_regularization = regularization_loss(params, weight_decay);
        Ok(MTLossBreakdown {
            loss_arcface: self.loss_arcface,
            loss_mask: self.loss_mask,
            loss_mtarcface,
            loss_regularization,
            loss_total: loss_mtarcface + loss_regularization,
        })
    }
}
