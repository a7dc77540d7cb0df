//! Additive angular margin identity head.
//!
//! Identity logits are scaled cosines between the normalized embedding and
//! normalized per-class weight columns; the ground-truth class gets a fixed
//! angle added before the cosine: `s*cos(theta_y + m)` against `s*cos(theta_j)`
//! for the others. Large angles (`cos theta_y <= cos(pi - m)`) fall back to
//! the linear form `cos theta_y - m*sin(m)`, which keeps the target logit
//! monotone in the angle.

use ndarray::{Array1, Array2, ArrayView2};

use crate::{Error, Result};

/// Cosines are clamped to `[-1 + EPS, 1 - EPS]` before the margin transform.
pub const COS_CLAMP_EPS: f64 = 1e-7;

/// Tolerance for the unit-norm check on incoming embeddings.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Margin/scale hyperparameters of the identity head.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArcHeadConfig {
    /// Logit scale s.
    pub scale: f64,
    /// Additive angular margin m, radians.
    pub margin: f64,
}

impl Default for ArcHeadConfig {
    fn default() -> Self {
        ArcHeadConfig {
            scale: 64.0,
            margin: 0.5,
        }
    }
}

impl ArcHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale <= 0.0 {
            return Err(Error::Config(format!(
                "arc scale {} must be > 0",
                self.scale
            )));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!(
                "arc margin {} outside [0, pi/2)",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Saved forward state for the backward pass.
pub struct ArcTrace {
    /// Clamped cosines, (B, C).
    pub cos: Array2<f64>,
    /// Entries where the clamp was active (gradient is zero there).
    pub clamped: Vec<(usize, usize)>,
    /// Per-column weight norms.
    pub w_norms: Array1<f64>,
    /// Normalized weight columns, (D, C).
    pub w_hat: Array2<f64>,
    pub labels: Vec<usize>,
}

fn check_unit_rows(embeddings: &ArrayView2<f64>) -> Result<()> {
    for row in embeddings.rows() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NotNormalized(norm));
        }
    }
    Ok(())
}

/// Margin- and scale-adjusted identity logits.
///
/// `embeddings` must be row-normalized, `weights` is the raw `(D, C)` class
/// matrix (columns are normalized internally), `labels[i]` is the target
/// class of row `i`.
pub fn arcface_logits(
    embeddings: &ArrayView2<f64>,
    weights: &ArrayView2<f64>,
    cfg: ArcHeadConfig,
    labels: &[usize],
) -> Result<(Array2<f64>, ArcTrace)> {
    cfg.validate()?;
    check_unit_rows(embeddings)?;
    let (b, d) = embeddings.dim();
    let (dw, c) = weights.dim();
    assert_eq!(d, dw, "embedding dim mismatch");
    assert_eq!(labels.len(), b, "labels length mismatch");
    assert!(labels.iter().all(|&y| y < c), "label out of range");

    let w_norms = Array1::from_iter(
        weights
            .columns()
            .into_iter()
            .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt()),
    );
    if w_norms.iter().any(|&n| n == 0.0) {
        return Err(Error::DegenerateEmbedding);
    }
    let mut w_hat = weights.to_owned();
    for (mut col, &n) in w_hat.columns_mut().into_iter().zip(w_norms.iter()) {
        col.mapv_inplace(|v| v / n);
    }

    let mut cos = embeddings.dot(&w_hat);
    let mut clamped = Vec::new();
    let lo = -1.0 + COS_CLAMP_EPS;
    let hi = 1.0 - COS_CLAMP_EPS;
    for ((i, j), v) in cos.indexed_iter_mut() {
        if *v < lo || *v > hi {
            clamped.push((i, j));
            *v = v.clamp(lo, hi);
        }
    }

    let (sin_m, cos_m) = cfg.margin.sin_cos();
    let fallback_threshold = (std::f64::consts::PI - cfg.margin).cos();
    let mut logits = cos.clone();
    for (i, &y) in labels.iter().enumerate() {
        let cy = cos[(i, y)];
        logits[(i, y)] = if cy > fallback_threshold {
            cy * cos_m - (1.0 - cy * cy).sqrt() * sin_m
        } else {
            cy - cfg.margin * sin_m
        };
    }
    logits.mapv_inplace(|v| v * cfg.scale);

    Ok((
        logits,
        ArcTrace {
            cos,
            clamped,
            w_norms,
            w_hat,
            labels: labels.to_vec(),
        },
    ))
}

/// Backward of [`arcface_logits`]: returns `(d_embeddings, d_weights)`.
pub fn arcface_backward(
    d_logits: &Array2<f64>,
    embeddings: &ArrayView2<f64>,
    cfg: ArcHeadConfig,
    trace: &ArcTrace,
) -> (Array2<f64>, Array2<f64>) {
    let (sin_m, cos_m) = cfg.margin.sin_cos();
    let fallback_threshold = (std::f64::consts::PI - cfg.margin).cos();

    // d(loss)/d(cos theta_j)
    let mut d_cos = d_logits.mapv(|v| v * cfg.scale);
    for (i, &y) in trace.labels.iter().enumerate() {
        let cy = trace.cos[(i, y)];
        let dpsi = if cy > fallback_threshold {
            cos_m + cy * sin_m / (1.0 - cy * cy).sqrt()
        } else {
            1.0
        };
        d_cos[(i, y)] *= dpsi;
    }
    for &(i, j) in &trace.clamped {
        d_cos[(i, j)] = 0.0;
    }

    let d_embeddings = d_cos.dot(&trace.w_hat.t());

    // Gradient through per-column weight normalization:
    // d_w[:,j] = (d_what[:,j] - w_hat[:,j] * <w_hat[:,j], d_what[:,j]>) / ||w_j||
    let d_w_hat = embeddings.t().dot(&d_cos); // (D, C)
    let mut d_weights = d_w_hat.clone();
    for (j, mut col) in d_weights.columns_mut().into_iter().enumerate() {
        let w_col = trace.w_hat.column(j);
        let proj: f64 = w_col
            .iter()
            .zip(d_w_hat.column(j).iter())
            .map(|(a, b)| a * b)
            .sum();
        let inv_norm = 1.0 / trace.w_norms[j];
        for (v, &wh) in col.iter_mut().zip(w_col.iter()) {
            *v = (*v - wh * proj) * inv_norm;
        }
    }

    (d_embeddings, d_weights)
}
