//! SGD training loop: staircase learning-rate schedule, classical momentum,
//! CSV curve logging, and resumable checkpoints.
//!
//! A single-threaded run is a deterministic function of `(config, datasets)`;
//! resuming from a checkpoint at step k reproduces the uninterrupted run's
//! log rows for every step > k byte-for-byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};

use crate::datamodel::AlignedFace;
use crate::loss::{self, MTLossBreakdown};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::{
    arcface_backward, arcface_logits, faces_to_batch, normalize_backward, normalize_embeddings,
    Gradients, ModelConfig, Network,
};
use crate::rng::{self, Domain};
use crate::sampler::{next_batch, DualDataset, SamplerConfig};
use crate::{Error, Result};

/// CSV header of the training log.
pub const LOG_HEADER: &str = "step,lr,loss_total,loss_arcface,loss_mask,id_acc,mask_acc";

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_steps: Vec<u64>,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: u64,
    /// 0 disables periodic checkpoints (the final one is always written).
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor {} outside (0, 1)",
                self.lr_decay_factor
            )));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config(format!(
                "base_lr {} must be > 0",
                self.base_lr
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        for w in self.lr_decay_steps.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config(format!(
                    "lr_decay_steps must be strictly increasing, got {:?}",
                    self.lr_decay_steps
                )));
            }
        }
        if let Some(&last) = self.lr_decay_steps.last() {
            if last >= self.total_steps {
                return Err(Error::Config(format!(
                    "lr decay step {last} is not below total_steps {}",
                    self.total_steps
                )));
            }
        }
        Ok(())
    }
}

/// Piecewise-constant staircase: `base_lr * factor^k` where k counts decay
/// steps at or before `step`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let k = cfg.lr_decay_steps.iter().filter(|&&d| d <= step).count();
    cfg.base_lr * cfg.lr_decay_factor.powi(k as i32)
}

/// Classical momentum update: `v <- momentum*v + g; theta <- theta - lr*v`.
///
/// Fails (without touching any parameter) if a gradient is non-finite.
pub fn sgd_step(
    net: &mut Network,
    grads: &Gradients,
    velocity: &mut Gradients,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if let Some(name) = grads.find_non_finite(&net.params) {
        return Err(Error::NonFiniteGradient { name });
    }
    for (id, param) in net.params.iter_mut().enumerate() {
        let v = velocity.get_mut(id);
        let g = grads.get(id);
        v.zip_mut_with(g, |v, &g| *v = momentum * *v + g);
        param.value.zip_mut_with(v, |p, &v| *p -= lr * v);
    }
    Ok(())
}

/// Batch-level accuracies logged next to the losses.
#[derive(Debug, Clone, Copy)]
pub struct BatchMetrics {
    /// Top-1 over the margin-adjusted identity logits.
    pub id_acc: f64,
    /// Argmax over the 2-way mask logits.
    pub mask_acc: f64,
}

fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

/// One training step's loss, gradients, and batch metrics.
///
/// The chain is: backbone forward -> normalize embeddings -> margin logits
/// -> combined loss; backward retraces it and adds the L2 term
/// (`2 * weight_decay * theta`) for eligible weights.
///
/// `mask_loss_weight` scales only the mask-head gradient path: 1 trains the
/// full multi-task objective, 0 is the plain ArcFace baseline (the reported
/// breakdown always carries the canonical combined-loss accounting).
pub fn compute_step(
    net: &Network,
    input: &Array4<f64>,
    labels: &[usize],
    mask_flags: &[u8],
    dropout_mask: Option<&Array2<f64>>,
    weight_decay: f64,
    mask_loss_weight: f64,
) -> Result<(MTLossBreakdown, Gradients, BatchMetrics)> {
    let (out, trace) = net.forward(input, dropout_mask, true);
    let trace = trace.expect("trace requested");

    let normalized = normalize_embeddings(&out.embeddings)?;
    let (logits_arc, arc_trace) =
        arcface_logits(&normalized.view(), &net.arc_weights(), net.cfg.arc, labels)?;

    let (partial, d_arc_logits, mut d_mask_logits) =
        loss::total_loss_backward(&logits_arc, labels, &out.logits_mask, mask_flags)?;
    if mask_loss_weight != 1.0 {
        d_mask_logits.mapv_inplace(|v| v * mask_loss_weight);
    }
    let breakdown = partial.into_breakdown(&net.params, weight_decay)?;

    let (d_normalized, d_arc_w) =
        arcface_backward(&d_arc_logits, &normalized.view(), net.cfg.arc, &arc_trace);
    let d_embeddings = normalize_backward(&d_normalized, &out.embeddings, &normalized);

    let mut grads = net.backward(&trace, &d_embeddings, &d_mask_logits);
    grads.get_mut(net.arc_weight_id()).assign(&d_arc_w);

    if weight_decay > 0.0 {
        for (id, param) in net.params.iter().enumerate() {
            if param.weight_decay {
                grads
                    .get_mut(id)
                    .zip_mut_with(&param.value, |g, &p| *g += 2.0 * weight_decay * p);
            }
        }
    }

    let mut id_hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if argmax_row(logits_arc.row(i)) == y {
            id_hits += 1;
        }
    }
    let mut mask_hits = 0usize;
    for (i, &f) in mask_flags.iter().enumerate() {
        if argmax_row(out.logits_mask.row(i)) == f as usize {
            mask_hits += 1;
        }
    }
    let metrics = BatchMetrics {
        id_acc: id_hits as f64 / labels.len() as f64,
        mask_acc: mask_hits as f64 / mask_flags.len() as f64,
    };

    Ok((breakdown, grads, metrics))
}

/// Forward-only twin of [`compute_step`]; the finite-difference oracle in
/// the test suite drives this.
pub fn compute_loss_only(
    net: &Network,
    input: &Array4<f64>,
    labels: &[usize],
    mask_flags: &[u8],
    dropout_mask: Option<&Array2<f64>>,
    weight_decay: f64,
) -> Result<MTLossBreakdown> {
    let (out, _) = net.forward(input, dropout_mask, false);
    let normalized = normalize_embeddings(&out.embeddings)?;
    let (logits_arc, _) =
        arcface_logits(&normalized.view(), &net.arc_weights(), net.cfg.arc, labels)?;
    loss::total_loss(
        &logits_arc,
        labels,
        &out.logits_mask,
        mask_flags,
        &net.params,
        weight_decay,
    )
}

/// Result of a completed training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub final_breakdown: MTLossBreakdown,
}

fn log_row(
    w: &mut impl Write,
    step: u64,
    lr: f64,
    bd: &MTLossBreakdown,
    m: &BatchMetrics,
) -> std::io::Result<()> {
    writeln!(
        w,
        "{step},{lr},{},{},{},{},{}",
        bd.loss_total, bd.loss_arcface, bd.loss_mask, m.id_acc, m.mask_acc
    )
}

/// Run the training loop with the full multi-task objective.
///
/// `model_cfg.num_classes` must match the dataset's identity count. With
/// `resume_from`, parameters, velocity, and the sampler position come from
/// the checkpoint and new log rows are appended to an existing log.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    masked_probability: f64,
    data: &DualDataset,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    train_weighted(
        cfg,
        model_cfg,
        masked_probability,
        1.0,
        data,
        out_dir,
        resume_from,
    )
}

/// [`train`] with an explicit mask-loss weight (0 = ArcFace-only baseline).
pub fn train_weighted(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    masked_probability: f64,
    mask_loss_weight: f64,
    data: &DualDataset,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let c = data.original.manifest.num_identities();
    if model_cfg.num_classes != c {
        return Err(Error::Config(format!(
            "model num_classes {} != dataset identities {c}",
            model_cfg.num_classes
        )));
    }
    if data.original.side != model_cfg.backbone.input_size {
        return Err(Error::Config(format!(
            "dataset image size {} != model input_size {}",
            data.original.side, model_cfg.backbone.input_size
        )));
    }
    let sampler_cfg = SamplerConfig {
        seed: cfg.seed,
        masked_probability,
        batch_size: cfg.batch_size,
    };
    sampler_cfg.validate()?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.csv");

    let (mut net, mut velocity, start_step, mut log_file) = match resume_from {
        Some(ckpt_path) => {
            let loaded = load_checkpoint(ckpt_path)?;
            if &loaded.network.cfg != model_cfg {
                return Err(Error::Config(
                    "checkpoint model config does not match run config".into(),
                ));
            }
            if loaded.sampler_seed != cfg.seed {
                return Err(Error::Config(format!(
                    "checkpoint sampler seed {} != config seed {}",
                    loaded.sampler_seed, cfg.seed
                )));
            }
            let velocity = loaded
                .velocity
                .unwrap_or_else(|| loaded.network.params.zeros_like());
            let file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?;
            (loaded.network, velocity, loaded.step, file)
        }
        None => {
            let net = Network::init(model_cfg.clone(), cfg.seed)?;
            let velocity = net.params.zeros_like();
            let mut file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
            (net, velocity, 0u64, file)
        }
    };

    let mut last_breakdown = None;
    for step in start_step..cfg.total_steps {
        let lr = lr_at(step, cfg);
        let batch = next_batch(&sampler_cfg, step, data);
        let faces: Vec<&AlignedFace> = batch.iter().map(|r| &r.face).collect();
        let input = faces_to_batch(&faces);
        let labels: Vec<usize> = batch.iter().map(|r| r.identity_label).collect();
        let flags: Vec<u8> = batch.iter().map(|r| r.mask_flag).collect();

        let mut dropout_stream = rng::stream(cfg.seed, Domain::Dropout, &[step]);
        let dropout = net.dropout_mask(batch.len(), &mut dropout_stream);

        let (breakdown, grads, metrics) = compute_step(
            &net,
            &input,
            &labels,
            &flags,
            dropout.as_ref(),
            cfg.weight_decay,
            mask_loss_weight,
        )?;

        sgd_step(&mut net, &grads, &mut velocity, lr, cfg.momentum)?;

        if step % cfg.log_every == 0 {
            log_row(&mut log_file, step, lr, &breakdown, &metrics)
                .map_err(|e| Error::io(&log_path, e))?;
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            let path = out_dir.join(format!("ckpt_step_{:07}.ckpt", step + 1));
            save_checkpoint(&path, &net, Some(&velocity), cfg.seed, step + 1)?;
        }
        last_breakdown = Some(breakdown);
    }

    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = out_dir.join("final.ckpt");
    save_checkpoint(
        &final_checkpoint,
        &net,
        Some(&velocity),
        cfg.seed,
        cfg.total_steps,
    )?;

    Ok(TrainOutcome {
        final_checkpoint,
        log_path,
        final_breakdown: last_breakdown.expect("at least one step ran"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArcHeadConfig, BackboneConfig};

    fn full_scale_schedule() -> TrainConfig {
        TrainConfig {
            total_steps: 300_000,
            batch_size: 512,
            base_lr: 0.0015,
            momentum: 0.9,
            lr_decay_factor: 0.3,
            lr_decay_steps: vec![120_000, 200_000, 280_000],
            weight_decay: 5e-4,
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
        }
    }

    #[test]
    fn lr_schedule_reproduces_reference_points() {
        let cfg = full_scale_schedule();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
        assert_eq!(lr_at(0, &cfg), 0.0015);
        assert_eq!(lr_at(119_999, &cfg), 0.0015);
        assert!(close(lr_at(120_000, &cfg), 4.5e-4));
        assert!(close(lr_at(200_000, &cfg), 1.35e-4));
        assert!(close(lr_at(280_000, &cfg), 4.05e-5));
        assert!(close(lr_at(299_999, &cfg), 4.05e-5));
    }

    #[test]
    fn lr_staircase_has_expected_level_count() {
        let cfg = full_scale_schedule();
        let mut levels = vec![lr_at(0, &cfg)];
        for step in 1..cfg.total_steps {
            let lr = lr_at(step, &cfg);
            if lr != *levels.last().unwrap() {
                levels.push(lr);
            }
            if step > 290_000 {
                break;
            }
        }
        assert_eq!(levels.len(), cfg.lr_decay_steps.len() + 1);
        for w in levels.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn config_validation_rejects_bad_schedules() {
        let mut cfg = full_scale_schedule();
        cfg.lr_decay_steps = vec![100, 100];
        assert!(cfg.validate().is_err());
        let mut cfg = full_scale_schedule();
        cfg.lr_decay_steps = vec![300_000];
        assert!(cfg.validate().is_err());
        let mut cfg = full_scale_schedule();
        cfg.lr_decay_factor = 1.0;
        assert!(cfg.validate().is_err());
    }

    fn tiny_net() -> Network {
        Network::init(
            ModelConfig {
                backbone: BackboneConfig {
                    input_size: 8,
                    widths: vec![4],
                    blocks_per_stage: 1,
                    embedding_dim: 4,
                    dropout_rate: 0.0,
                },
                arc: ArcHeadConfig {
                    scale: 4.0,
                    margin: 0.2,
                },
                num_classes: 2,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn sgd_plain_gradient_descent() {
        let mut net = tiny_net();
        let mut vel = net.params.zeros_like();
        let mut grads = net.params.zeros_like();
        net.params.get_mut(0).fill(1.0);
        grads.get_mut(0).fill(0.5);
        sgd_step(&mut net, &grads, &mut vel, 1.0, 0.0).unwrap();
        for v in net.params.get(0).iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_momentum_unrolls_by_hand() {
        // v0=0, g=1, momentum 0.9, lr 0.1:
        // step 1: v=1,   theta -= 0.1   -> -0.1 cumulative
        // step 2: v=1.9, theta -= 0.19  -> -0.29 cumulative
        let mut net = tiny_net();
        let mut vel = net.params.zeros_like();
        let mut grads = net.params.zeros_like();
        net.params.get_mut(0).fill(0.0);
        grads.get_mut(0).fill(1.0);
        sgd_step(&mut net, &grads, &mut vel, 0.1, 0.9).unwrap();
        let after_one = net.params.get(0)[[0, 0]];
        assert!((after_one + 0.1).abs() < 1e-15, "{after_one}");
        sgd_step(&mut net, &grads, &mut vel, 0.1, 0.9).unwrap();
        let after_two = net.params.get(0)[[0, 0]];
        assert!((after_two + 0.29).abs() < 1e-12, "{after_two}");
    }

    #[test]
    fn sgd_zero_gradient_decays_then_freezes() {
        let mut net = tiny_net();
        let mut vel = net.params.zeros_like();
        let mut grads = net.params.zeros_like();
        net.params.get_mut(0).fill(1.0);
        grads.get_mut(0).fill(1.0);
        sgd_step(&mut net, &grads, &mut vel, 0.1, 0.5).unwrap();
        grads.get_mut(0).fill(0.0);
        // velocity halves each step; theta converges
        for _ in 0..200 {
            sgd_step(&mut net, &grads, &mut vel, 0.1, 0.5).unwrap();
        }
        let frozen = net.params.get(0)[[0, 0]];
        sgd_step(&mut net, &grads, &mut vel, 0.1, 0.5).unwrap();
        assert!((net.params.get(0)[[0, 0]] - frozen).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_non_finite_gradients_without_update() {
        let mut net = tiny_net();
        let before = net.params.get(0).clone();
        let mut vel = net.params.zeros_like();
        let mut grads = net.params.zeros_like();
        grads.get_mut(0)[[0, 0]] = f64::NAN;
        let err = sgd_step(&mut net, &grads, &mut vel, 0.1, 0.9).unwrap_err();
        match err {
            Error::NonFiniteGradient { name } => assert_eq!(name, "stem.w"),
            other => panic!("unexpected: {other:?}"),
        }
        assert_eq!(net.params.get(0), &before);
    }
}
