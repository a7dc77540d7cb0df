//! Verification and mask-usage evaluation harnesses.
//!
//! Pair verification follows the LFW convention: cosine similarity of
//! normalized embeddings, threshold cross-validated over contiguous folds
//! (per fold, the threshold maximizing accuracy on the other folds is
//! applied to the held-out fold). Mask usage thresholds P(masked) at 0.5.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::datamodel::{AlignedFace, VerificationPair};
use crate::model::{faces_to_batch, normalize_embeddings, Network};
use crate::{Error, Result};

/// Threshold grid: 400 points spanning [-1, 1].
pub const THRESHOLD_GRID_SIZE: usize = 400;

/// Decision threshold for mask-usage classification.
pub const MASK_DECISION_THRESHOLD: f64 = 0.5;

/// Batch size used for embedding extraction.
const EMBED_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationResult {
    /// Mean held-out fold accuracy, in [0, 1].
    pub accuracy: f64,
    /// Grid threshold maximizing accuracy over all pairs.
    pub best_threshold: f64,
    pub num_pairs: usize,
    pub per_fold_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskUsageResult {
    pub accuracy: f64,
    pub num_faces: usize,
    /// Always [`MASK_DECISION_THRESHOLD`].
    pub threshold: f64,
}

/// Inference-mode embeddings for a list of faces, L2-normalized,
/// order-preserving.
pub fn embed_all(net: &Network, faces: &[&AlignedFace]) -> Result<Array2<f64>> {
    let d = net.embedding_dim();
    let mut out = Array2::<f64>::zeros((faces.len(), d));
    for (chunk_idx, chunk) in faces.chunks(EMBED_BATCH).enumerate() {
        let input = faces_to_batch(chunk);
        let (fwd, _) = net.forward(&input, None, false);
        let normalized = normalize_embeddings(&fwd.embeddings)?;
        for (i, row) in normalized.rows().into_iter().enumerate() {
            out.row_mut(chunk_idx * EMBED_BATCH + i).assign(&row);
        }
    }
    Ok(out)
}

/// Mask-usage probabilities `P(masked)` for a list of faces.
pub fn mask_probabilities(net: &Network, faces: &[&AlignedFace]) -> Vec<f64> {
    let mut out = Vec::with_capacity(faces.len());
    for chunk in faces.chunks(EMBED_BATCH) {
        let input = faces_to_batch(chunk);
        let (fwd, _) = net.forward(&input, None, false);
        for row in fwd.logits_mask.rows() {
            // 2-way softmax; index 1 is the masked class
            let m = row[0].max(row[1]);
            let e0 = (row[0] - m).exp();
            let e1 = (row[1] - m).exp();
            out.push(e1 / (e0 + e1));
        }
    }
    out
}

/// The fixed threshold grid.
pub fn threshold_grid() -> Vec<f64> {
    (0..THRESHOLD_GRID_SIZE)
        .map(|i| -1.0 + 2.0 * i as f64 / (THRESHOLD_GRID_SIZE - 1) as f64)
        .collect()
}

/// Predict "same identity" iff similarity strictly exceeds the threshold
/// (ties count as different).
fn correct_at(sim: f64, same: bool, threshold: f64) -> bool {
    (sim > threshold) == same
}

/// Core of the verification protocol, operating on precomputed similarities.
pub fn verification_from_sims(
    sims: &[f64],
    same_flags: &[bool],
    folds: usize,
) -> Result<VerificationResult> {
    let n = sims.len();
    assert_eq!(n, same_flags.len());
    if folds == 0 || n == 0 {
        return Err(Error::Eval("empty pair list or zero folds".into()));
    }
    if !n.is_multiple_of(folds) {
        return Err(Error::Eval(format!(
            "{n} pairs do not divide into {folds} equal folds"
        )));
    }
    let fold_len = n / folds;
    let grid = threshold_grid();

    let accuracy_on = |threshold: f64, skip_fold: Option<usize>| -> f64 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for (i, (&s, &same)) in sims.iter().zip(same_flags).enumerate() {
            if let Some(f) = skip_fold {
                if i / fold_len == f {
                    continue;
                }
            }
            hits += correct_at(s, same, threshold) as usize;
            total += 1;
        }
        hits as f64 / total as f64
    };

    let best_on = |skip_fold: Option<usize>| -> f64 {
        let mut best_t = grid[0];
        let mut best_acc = -1.0;
        for &t in &grid {
            let acc = accuracy_on(t, skip_fold);
            if acc > best_acc {
                best_acc = acc;
                best_t = t;
            }
        }
        best_t
    };

    let mut per_fold = Vec::with_capacity(folds);
    for fold in 0..folds {
        let t = best_on(Some(fold));
        let mut hits = 0usize;
        for i in fold * fold_len..(fold + 1) * fold_len {
            hits += correct_at(sims[i], same_flags[i], t) as usize;
        }
        per_fold.push(hits as f64 / fold_len as f64);
    }
    let accuracy = per_fold.iter().sum::<f64>() / folds as f64;

    Ok(VerificationResult {
        accuracy,
        best_threshold: best_on(None),
        num_pairs: n,
        per_fold_accuracies: per_fold,
    })
}

/// Cosine similarity per pair via embeddings, then the fold protocol.
pub fn verification_accuracy(
    pairs: &[VerificationPair],
    net: &Network,
    folds: usize,
) -> Result<VerificationResult> {
    if pairs.len() < folds || folds == 0 {
        return Err(Error::Eval(format!(
            "need at least {folds} pairs for {folds} folds, have {}",
            pairs.len()
        )));
    }
    let faces_a: Vec<&AlignedFace> = pairs.iter().map(|p| &p.face_a).collect();
    let faces_b: Vec<&AlignedFace> = pairs.iter().map(|p| &p.face_b).collect();
    let emb_a = embed_all(net, &faces_a)?;
    let emb_b = embed_all(net, &faces_b)?;

    let sims: Vec<f64> = (0..pairs.len())
        .map(|i| {
            emb_a
                .row(i)
                .iter()
                .zip(emb_b.row(i).iter())
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    let flags: Vec<bool> = pairs.iter().map(|p| p.same_identity).collect();
    verification_from_sims(&sims, &flags, folds)
}

/// Mask-usage accuracy at the fixed 0.5 threshold.
pub fn mask_usage_accuracy(faces: &[(&AlignedFace, u8)], net: &Network) -> Result<MaskUsageResult> {
    if faces.is_empty() {
        return Err(Error::Eval("no faces to evaluate".into()));
    }
    let refs: Vec<&AlignedFace> = faces.iter().map(|(f, _)| *f).collect();
    let probs = mask_probabilities(net, &refs);
    let mut hits = 0usize;
    for (p, (_, flag)) in probs.iter().zip(faces) {
        let predicted_masked = *p > MASK_DECISION_THRESHOLD;
        hits += (predicted_masked == (*flag == 1)) as usize;
    }
    Ok(MaskUsageResult {
        accuracy: hits as f64 / faces.len() as f64,
        num_faces: faces.len(),
        threshold: MASK_DECISION_THRESHOLD,
    })
}

/// One labelled run of a verification experiment.
#[derive(Debug, Clone)]
pub struct DatasetScore {
    pub dataset: String,
    pub result: VerificationResult,
}

/// Side-by-side accuracy table for two models over the same dataset list.
#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub model_a: String,
    pub model_b: String,
    /// (dataset, accuracy a, accuracy b), accuracies in [0, 1].
    pub rows: Vec<(String, f64, f64)>,
}

/// Pair up per-dataset results from two models.
pub fn compare_models(
    model_a: (&str, &[DatasetScore]),
    model_b: (&str, &[DatasetScore]),
) -> Result<ComparisonTable> {
    let (name_a, scores_a) = model_a;
    let (name_b, scores_b) = model_b;
    if scores_a.len() != scores_b.len() {
        return Err(Error::Eval(format!(
            "dataset lists differ in length: {} vs {}",
            scores_a.len(),
            scores_b.len()
        )));
    }
    let mut rows = Vec::with_capacity(scores_a.len());
    for (a, b) in scores_a.iter().zip(scores_b) {
        if a.dataset != b.dataset {
            return Err(Error::Eval(format!(
                "dataset lists differ: '{}' vs '{}'",
                a.dataset, b.dataset
            )));
        }
        rows.push((a.dataset.clone(), a.result.accuracy, b.result.accuracy));
    }
    Ok(ComparisonTable {
        model_a: name_a.to_string(),
        model_b: name_b.to_string(),
        rows,
    })
}

impl ComparisonTable {
    /// Aligned plain-text rendering, accuracies in percent with deltas.
    pub fn to_text(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|(d, _, _)| d.len())
            .chain(["Dataset".len()])
            .max()
            .unwrap_or(7);
        let col_a = self.model_a.len().max(8);
        let col_b = self.model_b.len().max(8);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>col_a$}  {:>col_b$}  {:>7}",
            "Dataset", self.model_a, self.model_b, "Delta"
        );
        let total_w = name_w + col_a + col_b + 7 + 6;
        let _ = writeln!(out, "{}", "-".repeat(total_w));
        for (dataset, a, b) in &self.rows {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:>col_a$.2}  {:>col_b$.2}  {:>+7.2}",
                dataset,
                a * 100.0,
                b * 100.0,
                (a - b) * 100.0
            );
        }
        out
    }

    /// CSV twin of [`to_text`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,model_a,model_b,accuracy_a,accuracy_b,delta\n");
        for (dataset, a, b) in &self.rows {
            let _ = writeln!(
                out,
                "{dataset},{},{},{:.4},{:.4},{:+.4}",
                self.model_a,
                self.model_b,
                a * 100.0,
                b * 100.0,
                (a - b) * 100.0
            );
        }
        out
    }
}

/// One line of the results CSV (`dataset,model,accuracy,best_threshold,num_pairs`).
pub fn result_csv_row(dataset: &str, model: &str, r: &VerificationResult) -> String {
    format!(
        "{dataset},{model},{},{},{}",
        r.accuracy, r.best_threshold, r.num_pairs
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable(n_pos: usize, n_neg: usize) -> (Vec<f64>, Vec<bool>) {
        // interleave so every fold sees both classes
        let mut sims = Vec::new();
        let mut flags = Vec::new();
        for i in 0..n_pos.max(n_neg) {
            if i < n_pos {
                sims.push(0.9);
                flags.push(true);
            }
            if i < n_neg {
                sims.push(0.1);
                flags.push(false);
            }
        }
        (sims, flags)
    }

    #[test]
    fn embed_all_preserves_order_and_determinism() {
        use crate::model::{BackboneConfig, ModelConfig, Network};

        let net = Network::init(
            ModelConfig {
                backbone: BackboneConfig {
                    input_size: 32,
                    widths: vec![4],
                    blocks_per_stage: 1,
                    embedding_dim: 8,
                    dropout_rate: 0.2,
                },
                arc: crate::model::ArcHeadConfig::default(),
                num_classes: 3,
            },
            9,
        )
        .unwrap();

        let face = |v: u8| AlignedFace::new(32, vec![v; 32 * 32 * 3], "t").unwrap();
        let faces = [face(10), face(200), face(10), face(90)];
        let refs: Vec<&AlignedFace> = faces.iter().collect();
        let emb = embed_all(&net, &refs).unwrap();
        assert_eq!(emb.nrows(), 4);
        // duplicate input, identical embedding (dropout off at inference)
        for j in 0..emb.ncols() {
            assert_eq!(emb[(0, j)], emb[(2, j)]);
        }
        // self-similarity of a normalized embedding is 1
        let self_sim: f64 = emb.row(1).iter().map(|v| v * v).sum();
        assert!((self_sim - 1.0).abs() < 1e-6);
    }

    #[test]
    fn separable_pairs_score_one() {
        let (sims, flags) = separable(50, 50);
        for folds in [2usize, 5, 10] {
            let r = verification_from_sims(&sims, &flags, folds).unwrap();
            assert_eq!(r.accuracy, 1.0, "folds={folds}");
            assert_eq!(r.num_pairs, 100);
            assert_eq!(r.per_fold_accuracies.len(), folds);
            let mean =
                r.per_fold_accuracies.iter().sum::<f64>() / r.per_fold_accuracies.len() as f64;
            assert!((r.accuracy - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn inverted_labels_score_at_most_half_ish() {
        let (sims, mut flags) = separable(50, 50);
        for f in flags.iter_mut() {
            *f = !*f;
        }
        let r = verification_from_sims(&sims, &flags, 10).unwrap();
        // grid slack: thresholds outside (0.1, 0.9) classify everything as
        // one class, which still gets 0.5
        assert!(r.accuracy <= 0.5 + 1e-9, "accuracy {}", r.accuracy);
    }

    #[test]
    fn fold_mismatch_is_fatal() {
        let (sims, flags) = separable(7, 7);
        assert!(verification_from_sims(&sims, &flags, 10).is_err());
    }

    #[test]
    fn chosen_threshold_maximizes_grid_accuracy() {
        // noisy but separable-with-error construction
        let mut sims = Vec::new();
        let mut flags = Vec::new();
        for i in 0..30 {
            sims.push(0.5 + 0.4 * ((i % 7) as f64 / 7.0));
            flags.push(true);
            sims.push(-0.2 + 0.5 * ((i % 5) as f64 / 5.0));
            flags.push(false);
        }
        let r = verification_from_sims(&sims, &flags, 6).unwrap();
        let grid = threshold_grid();
        let acc_at = |t: f64| -> f64 {
            sims.iter()
                .zip(&flags)
                .filter(|(&s, &f)| correct_at(s, f, t))
                .count() as f64
                / sims.len() as f64
        };
        let best_acc = acc_at(r.best_threshold);
        for &t in &grid {
            assert!(acc_at(t) <= best_acc + 1e-12);
        }
    }

    #[test]
    fn comparison_table_renders_percent_row() {
        let vr = |acc: f64| VerificationResult {
            accuracy: acc,
            best_threshold: 0.25,
            num_pairs: 6000,
            per_fold_accuracies: vec![acc; 10],
        };
        let a = [DatasetScore {
            dataset: "Masked LFW".into(),
            result: vr(0.9892),
        }];
        let b = [DatasetScore {
            dataset: "Masked LFW".into(),
            result: vr(0.9475),
        }];
        let table = compare_models(("Proposed Method", &a), ("Original model", &b)).unwrap();
        let text = table.to_text();
        assert!(text.contains("98.92"), "{text}");
        assert!(text.contains("94.75"), "{text}");
        assert!(text.contains("+4.17"), "{text}");
        let csv = table.to_csv();
        assert!(csv.contains("+4.1700"), "{csv}");
    }

    #[test]
    fn comparison_identical_inputs_all_deltas_zero() {
        let vr = VerificationResult {
            accuracy: 0.5,
            best_threshold: 0.0,
            num_pairs: 10,
            per_fold_accuracies: vec![0.5; 2],
        };
        let rows = [
            DatasetScore {
                dataset: "x".into(),
                result: vr.clone(),
            },
            DatasetScore {
                dataset: "y".into(),
                result: vr.clone(),
            },
        ];
        let t = compare_models(("a", &rows), ("b", &rows)).unwrap();
        for (_, a, b) in &t.rows {
            assert_eq!(a, b);
        }
        assert!(t.to_text().contains("+0.00"));
    }

    #[test]
    fn comparison_rejects_mismatched_lists() {
        let vr = VerificationResult {
            accuracy: 0.5,
            best_threshold: 0.0,
            num_pairs: 10,
            per_fold_accuracies: vec![0.5; 2],
        };
        let a = [DatasetScore {
            dataset: "x".into(),
            result: vr.clone(),
        }];
        let b = [DatasetScore {
            dataset: "y".into(),
            result: vr,
        }];
        assert!(compare_models(("a", &a), ("b", &b)).is_err());
    }

    #[test]
    fn scale_invariance_of_verification() {
        use crate::model::normalize_embeddings;
        use crate::rng::{stream, Domain};
        use rand::Rng;

        // raw embeddings scaled by any c > 0 yield the same result fields
        let mut rng = stream(31, Domain::Fixture, &[70]);
        let n = 40usize;
        let d = 8usize;
        let mut raw_a = Array2::<f64>::zeros((n, d));
        let mut raw_b = Array2::<f64>::zeros((n, d));
        for v in raw_a.iter_mut().chain(raw_b.iter_mut()) {
            *v = rng.random_range(-2.0..2.0);
        }
        let flags: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();

        let sims_for = |scale: f64| -> Vec<f64> {
            let ea = normalize_embeddings(&raw_a.mapv(|v| v * scale)).unwrap();
            let eb = normalize_embeddings(&raw_b.mapv(|v| v * scale)).unwrap();
            (0..n)
                .map(|i| {
                    ea.row(i)
                        .iter()
                        .zip(eb.row(i).iter())
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect()
        };

        let base = verification_from_sims(&sims_for(1.0), &flags, 4).unwrap();
        for c in [0.001, 0.37, 3.7, 1000.0] {
            let scaled = verification_from_sims(&sims_for(c), &flags, 4).unwrap();
            assert_eq!(base, scaled, "scale {c} changed the result");
        }
    }

    #[test]
    fn similarity_ties_count_as_different() {
        // all sims exactly at a grid threshold; positives lose, negatives win
        let grid = threshold_grid();
        let t = grid[200];
        let sims = [t; 10];
        let flags = vec![
            true, false, true, false, true, false, true, false, true, false,
        ];
        let hits = sims
            .iter()
            .zip(&flags)
            .filter(|(&s, &f)| correct_at(s, f, t))
            .count();
        assert_eq!(hits, 5);
    }
}
