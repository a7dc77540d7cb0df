//! Shared helpers for integration tests: finite-difference oracles and
//! tiny-model construction.

use ndarray::{Array2, Array4};
use rand::Rng;

use mtarcface::model::{ArcHeadConfig, BackboneConfig, ModelConfig, Network};
use mtarcface::rng::{stream, Domain};
use mtarcface::trainer::{compute_loss_only, compute_step};

/// The gradient-check model: D=4, C=3, 8x8 inputs.
pub fn tiny_model_config(dropout_rate: f64) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_size: 8,
            widths: vec![4, 6],
            blocks_per_stage: 1,
            embedding_dim: 4,
            dropout_rate,
        },
        arc: ArcHeadConfig {
            scale: 12.0,
            margin: 0.4,
        },
        num_classes: 3,
    }
}

pub fn random_input(batch: usize, side: usize, seed: u64) -> Array4<f64> {
    let mut rng = stream(seed, Domain::Fixture, &[90]);
    let mut x = Array4::<f64>::zeros((batch, 3, side, side));
    for v in x.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    x
}

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub params_checked: usize,
}

/// Central-difference check of the full-model gradient at step size `h`.
///
/// Relative error uses a small denominator floor so near-zero gradients are
/// compared absolutely at the same scale.
pub fn full_model_gradcheck(
    net: &mut Network,
    input: &Array4<f64>,
    labels: &[usize],
    flags: &[u8],
    dropout_mask: Option<&Array2<f64>>,
    weight_decay: f64,
    h: f64,
) -> GradCheckReport {
    let (_, analytic, _) = compute_step(net, input, labels, flags, dropout_mask, weight_decay, 1.0)
        .expect("forward/backward");

    let mut max_rel_err = 0.0f64;
    let mut worst_param = String::new();
    let mut params_checked = 0usize;

    let num_params = net.params.len();
    for id in 0..num_params {
        let n = net.params.get(id).len();
        for flat in 0..n {
            let orig = net.params.get(id).as_slice().unwrap()[flat];

            net.params.get_mut(id).as_slice_mut().unwrap()[flat] = orig + h;
            let plus = compute_loss_only(net, input, labels, flags, dropout_mask, weight_decay)
                .expect("loss eval")
                .loss_total;
            net.params.get_mut(id).as_slice_mut().unwrap()[flat] = orig - h;
            let minus = compute_loss_only(net, input, labels, flags, dropout_mask, weight_decay)
                .expect("loss eval")
                .loss_total;
            net.params.get_mut(id).as_slice_mut().unwrap()[flat] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).as_slice().unwrap()[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_param = format!("{}[{}]", net.params.name(id), flat);
            }
            params_checked += 1;
        }
    }

    GradCheckReport {
        max_rel_err,
        worst_param,
        params_checked,
    }
}
