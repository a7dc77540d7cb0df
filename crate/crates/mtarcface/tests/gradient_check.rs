//! Analytic gradients against central finite differences, from the margin
//! head alone up to the full model.

mod common;

use ndarray::Array2;
use rand::Rng;

use mtarcface::loss;
use mtarcface::model::{
    arcface_backward, arcface_logits, normalize_backward, normalize_embeddings, ArcHeadConfig,
    Network,
};
use mtarcface::rng::{stream, Domain};

use common::{full_model_gradcheck, random_input, tiny_model_config};

/// Margin head + cross-entropy over random small instances
/// (D <= 8, C <= 5, B <= 4), gradients w.r.t. raw embeddings and W.
#[test]
fn arc_head_with_loss_matches_finite_differences() {
    for (case, (d, c, b)) in [(2usize, 3usize, 2usize), (8, 5, 4), (4, 4, 1)]
        .into_iter()
        .enumerate()
    {
        let mut rng = stream(1000 + case as u64, Domain::Fixture, &[7]);
        let mut raw = Array2::<f64>::zeros((b, d));
        for v in raw.iter_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
        let mut w = Array2::<f64>::zeros((d, c));
        for v in w.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let cfg = ArcHeadConfig {
            scale: 10.0,
            margin: 0.35,
        };

        let f = |raw: &Array2<f64>, w: &Array2<f64>| -> f64 {
            let e = normalize_embeddings(raw).unwrap();
            let (logits, _) = arcface_logits(&e.view(), &w.view(), cfg, &labels).unwrap();
            loss::arcface_loss(&logits, &labels).unwrap()
        };

        // analytic chain
        let e = normalize_embeddings(&raw).unwrap();
        let (logits, trace) = arcface_logits(&e.view(), &w.view(), cfg, &labels).unwrap();
        let (_, d_logits, _) = loss::total_loss_backward(
            &logits,
            &labels,
            &Array2::<f64>::zeros((b, 2)),
            &vec![0u8; b],
        )
        .unwrap();
        let (d_e, d_w) = arcface_backward(&d_logits, &e.view(), cfg, &trace);
        let d_raw = normalize_backward(&d_e, &raw, &e);

        let h = 1e-4;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-4);

        for i in 0..b {
            for j in 0..d {
                let mut p = raw.clone();
                p[(i, j)] += h;
                let mut m = raw.clone();
                m[(i, j)] -= h;
                let numeric = (f(&p, &w) - f(&m, &w)) / (2.0 * h);
                assert!(
                    rel(d_raw[(i, j)], numeric) < 1e-3,
                    "case {case} d_raw[({i},{j})]: {} vs {numeric}",
                    d_raw[(i, j)]
                );
            }
        }
        for i in 0..d {
            for j in 0..c {
                let mut p = w.clone();
                p[(i, j)] += h;
                let mut m = w.clone();
                m[(i, j)] -= h;
                let numeric = (f(&raw, &p) - f(&raw, &m)) / (2.0 * h);
                assert!(
                    rel(d_w[(i, j)], numeric) < 1e-3,
                    "case {case} d_w[({i},{j})]: {} vs {numeric}",
                    d_w[(i, j)]
                );
            }
        }
    }
}

/// Full tiny model (backbone + both heads + margin head + combined loss +
/// weight decay), every parameter, h = 1e-4, rel err < 1e-3.
#[test]
fn full_model_matches_finite_differences() {
    // Seeds chosen so no pre-activation sits within the probe radius of a
    // ReLU kink (central differences are invalid across one).
    let mut net = Network::init(tiny_model_config(0.0), 5).unwrap();
    net.randomize_all(41, 0.35);
    let input = random_input(2, 8, 11);
    let labels = [0usize, 2];
    let flags = [1u8, 0];

    let report = full_model_gradcheck(&mut net, &input, &labels, &flags, None, 1e-3, 1e-4);
    println!(
        "full-model gradcheck: {} scalars, max rel err {:.3e} at {}",
        report.params_checked, report.max_rel_err, report.worst_param
    );
    assert!(
        report.max_rel_err < 1e-3,
        "max rel err {} at {}",
        report.max_rel_err,
        report.worst_param
    );
}

/// With mask-loss weight 0 the run is plain identity training: the mask
/// head gets no gradient and every other gradient equals the finite
/// difference of the identity + regularization objective alone.
#[test]
fn zero_mask_weight_reduces_to_identity_training() {
    use mtarcface::trainer::{compute_loss_only, compute_step};

    let mut net = Network::init(tiny_model_config(0.0), 7).unwrap();
    net.randomize_all(41, 0.35);
    let input = random_input(2, 8, 11);
    let labels = [0usize, 2];
    let flags = [1u8, 0];
    let weight_decay = 1e-3;

    let (_, grads, _) =
        compute_step(&net, &input, &labels, &flags, None, weight_decay, 0.0).unwrap();

    // mask head carries only its weight-decay term; bias gradient is zero
    let mask_w = net.mask_weight_id();
    for (g, p) in grads.get(mask_w).iter().zip(net.params.get(mask_w).iter()) {
        assert!((g - 2.0 * weight_decay * p).abs() < 1e-15);
    }
    let bias_id = (0..net.params.len())
        .find(|&i| net.params.name(i) == "mask.b")
        .unwrap();
    assert!(grads.get(bias_id).iter().all(|&g| g == 0.0));

    // identity-only objective for the FD probe
    let ident_obj = |net: &Network| -> f64 {
        let bd = compute_loss_only(net, &input, &labels, &flags, None, weight_decay).unwrap();
        bd.loss_arcface + bd.loss_regularization
    };

    let h = 1e-4;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
    let mut worst = 0.0f64;
    for id in 0..net.params.len() {
        let name = net.params.name(id).to_string();
        if name.starts_with("mask.") {
            continue;
        }
        let n_elems = net.params.get(id).len();
        // spot-check a spread of coordinates per tensor
        for flat in (0..n_elems).step_by(7.max(n_elems / 8)) {
            let orig = net.params.get(id).as_slice().unwrap()[flat];
            net.params.get_mut(id).as_slice_mut().unwrap()[flat] = orig + h;
            let plus = ident_obj(&net);
            net.params.get_mut(id).as_slice_mut().unwrap()[flat] = orig - h;
            let minus = ident_obj(&net);
            net.params.get_mut(id).as_slice_mut().unwrap()[flat] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).as_slice().unwrap()[flat];
            worst = worst.max(rel(analytic, numeric));
        }
    }
    println!("identity-only gradcheck max rel err {worst:.3e}");
    assert!(worst < 1e-3, "max rel err {worst}");
}

/// Same check with an active (fixed) dropout mask.
#[test]
fn full_model_with_dropout_mask_matches_finite_differences() {
    let mut net = Network::init(tiny_model_config(0.25), 6).unwrap();
    net.randomize_all(26, 0.35);
    let input = random_input(2, 8, 5);
    let labels = [1usize, 2];
    let flags = [0u8, 1];
    let mut mask_stream = stream(9, Domain::Dropout, &[0]);
    let mask = net
        .dropout_mask(2, &mut mask_stream)
        .expect("dropout active");

    let report = full_model_gradcheck(&mut net, &input, &labels, &flags, Some(&mask), 1e-3, 1e-4);
    println!(
        "dropout gradcheck: {} scalars, max rel err {:.3e} at {}",
        report.params_checked, report.max_rel_err, report.worst_param
    );
    assert!(
        report.max_rel_err < 1e-3,
        "max rel err {} at {}",
        report.max_rel_err,
        report.worst_param
    );
}
