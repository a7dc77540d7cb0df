//! Acceptance suite: one pass/fail line per criterion (run with
//! `cargo test --test acceptance -- --nocapture` to see them all).
//!
//! Criteria 1-3 and 9 are property checks; 4-8 run the full toy pipeline
//! (fixture, masked twin, one multi-task and one identity-only training of
//! 2000 steps each, plus a determinism repeat) on the synthetic fixture.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;

use mtarcface::datamodel::{parse_pairs_file, FaceStore};
use mtarcface::evalkit::{mask_usage_accuracy, verification_accuracy};
use mtarcface::fixture::{make_fixture, FixtureConfig};
use mtarcface::loss::total_loss;
use mtarcface::maskgen::{build_masked_twin, sample_mask_spec, spec_stream, MaskType};
use mtarcface::model::checkpoint::load_checkpoint;
use mtarcface::model::{
    arcface_logits, ArcHeadConfig, BackboneConfig, ModelConfig, Network, ParamSet,
};
use mtarcface::rng::{stream, Domain};
use mtarcface::sampler::{plan_batch, DualDataset, SamplerConfig};
use mtarcface::trainer::{lr_at, train_weighted, TrainConfig};

use common::{full_model_gradcheck, random_input, tiny_model_config};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

/// Criterion 1: the combined-loss decomposition identities
/// (`mt = id + ln(mask + 1)`, `total = mt + reg`) hold to 1e-12 relative
/// over 1000 random inputs, in under a second.
#[test]
fn criterion_1_loss_identities() {
    let start = Instant::now();
    let mut rng = stream(101, Domain::Fixture, &[1]);
    let mut params = ParamSet::default();
    let w = params.add("w", &[4, 4], true);
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let b = 1 + trial % 4;
        let c = 2 + trial % 7;
        let mut la = Array2::<f64>::zeros((b, c));
        for v in la.iter_mut() {
            *v = rng.random_range(-40.0..40.0);
        }
        let mut lm = Array2::<f64>::zeros((b, 2));
        for v in lm.iter_mut() {
            *v = rng.random_range(-40.0..40.0);
        }
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let flags: Vec<u8> = (0..b).map(|_| rng.random_range(0..2u8)).collect();
        for v in params.get_mut(w).iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let lambda = rng.random_range(0.0..1e-2);

        let bd = total_loss(&la, &labels, &lm, &flags, &params, lambda).unwrap();
        let eq3 = (bd.loss_mtarcface - (bd.loss_arcface + (bd.loss_mask + 1.0).ln())).abs()
            / bd.loss_mtarcface.abs().max(1.0);
        let eq4 = (bd.loss_total - (bd.loss_mtarcface + bd.loss_regularization)).abs()
            / bd.loss_total.abs().max(1.0);
        worst = worst.max(eq3).max(eq4);
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "1 (loss identities)",
        worst <= 1e-12 && elapsed < 1.0,
        &format!("max relative deviation {worst:.3e} over 1000 inputs in {elapsed:.2}s"),
    );
}

/// Criterion 2: full-model analytic gradients vs central finite differences
/// (h = 1e-4) on the D=4/C=3/B=2/8x8 model, max rel err < 1e-3, under 30 s.
#[test]
fn criterion_2_gradient_oracle() {
    let start = Instant::now();
    let mut net = Network::init(tiny_model_config(0.0), 5).unwrap();
    net.randomize_all(41, 0.35);
    let input = random_input(2, 8, 11);
    let labels = [0usize, 2];
    let flags = [1u8, 0];
    let rep = full_model_gradcheck(&mut net, &input, &labels, &flags, None, 1e-3, 1e-4);
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "2 (gradient oracle)",
        rep.max_rel_err < 1e-3 && elapsed < 30.0,
        &format!(
            "{} parameters, max rel err {:.3e} at {}, {elapsed:.1}s",
            rep.params_checked, rep.max_rel_err, rep.worst_param
        ),
    );
}

/// Criterion 3: D=2 hand-set angles against the explicit arccos/cos
/// brute force, within 1e-6, for (s=64, m=0.5) and the (s=1, m=0) identity.
#[test]
fn criterion_3_arcface_logit_oracle() {
    let start = Instant::now();
    let unit = |deg: f64| {
        let a = deg.to_radians();
        [a.cos(), a.sin()]
    };
    let e = ndarray::arr2(&[unit(0.0)]);
    let cols = [unit(10.0), unit(50.0), unit(90.0)];
    let w = ndarray::arr2(&[
        [cols[0][0], cols[1][0], cols[2][0]],
        [cols[0][1], cols[1][1], cols[2][1]],
    ]);

    let mut worst: f64 = 0.0;
    for (scale, margin) in [(64.0, 0.5), (1.0, 0.0)] {
        for label in 0..3usize {
            let (logits, _) = arcface_logits(
                &e.view(),
                &w.view(),
                ArcHeadConfig { scale, margin },
                &[label],
            )
            .unwrap();
            for j in 0..3 {
                let cos: f64 = e
                    .row(0)
                    .iter()
                    .zip(w.column(j).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let theta = cos.clamp(-1.0, 1.0).acos();
                let want = if j == label {
                    scale * (theta + margin).cos()
                } else {
                    scale * theta.cos()
                };
                worst = worst.max((logits[(0, j)] - want).abs());
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "3 (margin logit oracle)",
        worst < 1e-6 && elapsed < 1.0,
        &format!("max |impl - brute force| = {worst:.3e}"),
    );
}

/// Criterion 9: the full-scale schedule constants.
#[test]
fn criterion_9_lr_schedule() {
    let cfg = TrainConfig {
        total_steps: 300_000,
        batch_size: 512,
        base_lr: 0.0015,
        momentum: 0.9,
        lr_decay_factor: 0.3,
        lr_decay_steps: vec![120_000, 200_000, 280_000],
        weight_decay: 5e-4,
        seed: 0,
        log_every: 1,
        checkpoint_every: 0,
    };
    let expect = [
        (0u64, 0.0015),
        (120_000, 4.5e-4),
        (200_000, 1.35e-4),
        (280_000, 4.05e-5),
    ];
    let mut worst: f64 = 0.0;
    for (step, want) in expect {
        let got = lr_at(step, &cfg);
        worst = worst.max((got - want).abs() / want);
    }
    report(
        "9 (learning-rate schedule)",
        worst <= 1e-12,
        &format!("max relative deviation {worst:.3e} over the four reference steps"),
    );
}

struct ToyRuns {
    masked_pairs_mt: f64,
    masked_pairs_base: f64,
    unmasked_pairs_mt: f64,
    unmasked_pairs_base: f64,
    mask_usage_mt: f64,
    mask_usage_faces: usize,
    train_elapsed: f64,
}

fn toy_run_config() -> (TrainConfig, ModelConfig) {
    let train = TrainConfig {
        total_steps: 2000,
        batch_size: 32,
        base_lr: 0.05,
        momentum: 0.9,
        lr_decay_factor: 0.3,
        lr_decay_steps: vec![1200, 1600],
        weight_decay: 5e-4,
        seed: 42,
        log_every: 1,
        checkpoint_every: 500,
    };
    let model = ModelConfig {
        backbone: BackboneConfig {
            input_size: 32,
            widths: vec![8, 16, 64],
            blocks_per_stage: 1,
            embedding_dim: 64,
            dropout_rate: 0.1,
        },
        arc: ArcHeadConfig {
            scale: 16.0,
            margin: 0.5,
        },
        num_classes: 20,
    };
    (train, model)
}

fn train_toy(
    root: &Path,
    name: &str,
    masked_probability: f64,
    mask_loss_weight: f64,
    data: &DualDataset,
) -> PathBuf {
    let (train_cfg, model_cfg) = toy_run_config();
    let out = root.join(name);
    let outcome = train_weighted(
        &train_cfg,
        &model_cfg,
        masked_probability,
        mask_loss_weight,
        data,
        &out,
        None,
    )
    .expect("training run");
    outcome.final_checkpoint
}

/// Criteria 4-8 share the synthetic fixture and the three training runs.
#[test]
fn criteria_4_to_8_fixture_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    // ---- fixture + twin -------------------------------------------------
    let fixture_cfg = FixtureConfig::default(); // 20 identities x 50 images, 32px
    let (orig_manifest, pairs_path) = make_fixture(&root.join("orig"), 42, &fixture_cfg).unwrap();
    assert_eq!(orig_manifest.num_identities(), 20);
    assert_eq!(orig_manifest.num_images, 1000);
    let masked_manifest = build_masked_twin(&orig_manifest, 42, &root.join("masked"), 1).unwrap();

    // ---- criterion 4: sampler + augmentation statistics ------------------
    {
        let start = Instant::now();
        // masked fraction at p = 0.5 over 10^4 draws
        let labels = vec![0usize; 1000];
        let cfg = SamplerConfig {
            seed: 42,
            masked_probability: 0.5,
            batch_size: 100,
        };
        let mut masked = 0usize;
        for step in 0..100 {
            masked += plan_batch(&cfg, step, &labels)
                .iter()
                .map(|s| s.mask_flag as usize)
                .sum::<usize>();
        }
        let frac = masked as f64 / 10_000.0;
        let frac_ok = (0.48..=0.52).contains(&frac);

        // mask-type frequencies over 6x10^4 draws
        let mut counts = [0usize; 6];
        for i in 0..60_000u64 {
            let spec = sample_mask_spec(&mut spec_stream(77, i));
            counts[MaskType::ALL
                .iter()
                .position(|&t| t == spec.mask_type)
                .unwrap()] += 1;
        }
        let type_ok = counts
            .iter()
            .all(|&c| (c as f64 / 60_000.0 - 1.0 / 6.0).abs() <= 0.01);

        // augmentation byte-determinism + seed sensitivity
        let twin_a = root.join("twin_a");
        let twin_b = root.join("twin_b");
        let twin_c = root.join("twin_c");
        build_masked_twin(&orig_manifest, 7, &twin_a, 1).unwrap();
        build_masked_twin(&orig_manifest, 7, &twin_b, 1).unwrap();
        build_masked_twin(&orig_manifest, 8, &twin_c, 1).unwrap();
        let mut identical = true;
        let mut differing = 0usize;
        let mut total = 0usize;
        for entry in &orig_manifest.identities {
            for file in &entry.files {
                let a = fs::read(twin_a.join(&entry.name).join(file)).unwrap();
                let b = fs::read(twin_b.join(&entry.name).join(file)).unwrap();
                let c = fs::read(twin_c.join(&entry.name).join(file)).unwrap();
                identical &= a == b;
                differing += (a != c) as usize;
                total += 1;
            }
        }
        let differ_ok = differing as f64 / total as f64 >= 0.99;
        let elapsed = start.elapsed().as_secs_f64();
        report(
            "4 (sampler and augmentation statistics)",
            frac_ok && type_ok && identical && differ_ok && elapsed < 60.0,
            &format!(
                "masked fraction {frac:.4}; type freqs {:?}; same-seed identical: {identical}; \
                 cross-seed differing {differing}/{total}; {elapsed:.1}s",
                counts
            ),
        );
    }

    // ---- training runs for criteria 5-8 ----------------------------------
    let train_orig = orig_manifest.split_holdout(10).unwrap().0;
    let train_mask = masked_manifest.split_holdout(10).unwrap().0;
    let data = DualDataset::new(
        FaceStore::load(&train_orig).unwrap(),
        FaceStore::load(&train_mask).unwrap(),
    )
    .unwrap();

    let t_train = Instant::now();
    let ckpt_mt = train_toy(root, "run_mt", 0.5, 1.0, &data);
    let ckpt_base = train_toy(root, "run_base", 0.0, 0.0, &data);
    let train_elapsed = t_train.elapsed().as_secs_f64();

    let net_mt = load_checkpoint(&ckpt_mt).unwrap().network;
    let net_base = load_checkpoint(&ckpt_base).unwrap().network;

    let masked_pairs = parse_pairs_file(&pairs_path, &masked_manifest).unwrap();
    let unmasked_pairs = parse_pairs_file(&pairs_path, &orig_manifest).unwrap();
    assert_eq!(masked_pairs.len(), 600);

    let runs = ToyRuns {
        masked_pairs_mt: verification_accuracy(&masked_pairs, &net_mt, 10)
            .unwrap()
            .accuracy,
        masked_pairs_base: verification_accuracy(&masked_pairs, &net_base, 10)
            .unwrap()
            .accuracy,
        unmasked_pairs_mt: verification_accuracy(&unmasked_pairs, &net_mt, 10)
            .unwrap()
            .accuracy,
        unmasked_pairs_base: verification_accuracy(&unmasked_pairs, &net_base, 10)
            .unwrap()
            .accuracy,
        mask_usage_mt: 0.0,
        mask_usage_faces: 0,
        train_elapsed,
    };

    // held-out faces for mask-usage: original flag 0, masked flag 1
    let held_orig = FaceStore::load(&orig_manifest.split_holdout(10).unwrap().1).unwrap();
    let held_mask = FaceStore::load(&masked_manifest.split_holdout(10).unwrap().1).unwrap();
    let mut faces = Vec::new();
    faces.extend(held_orig.faces.iter().map(|f| (f, 0u8)));
    faces.extend(held_mask.faces.iter().map(|f| (f, 1u8)));
    let usage = mask_usage_accuracy(&faces, &net_mt).unwrap();
    let runs = ToyRuns {
        mask_usage_mt: usage.accuracy,
        mask_usage_faces: usage.num_faces,
        ..runs
    };

    // ---- criterion 5: masked-pair gain >= 5 points ------------------------
    let gain = (runs.masked_pairs_mt - runs.masked_pairs_base) * 100.0;
    report(
        "5 (masked verification gain)",
        gain >= 5.0 && runs.train_elapsed < 900.0,
        &format!(
            "multi-task {:.2}% vs baseline {:.2}% on masked pairs (gain {gain:+.2} points); \
             both runs trained in {:.0}s",
            runs.masked_pairs_mt * 100.0,
            runs.masked_pairs_base * 100.0,
            runs.train_elapsed
        ),
    );

    // ---- criterion 6: unmasked drop within 3 points -----------------------
    let drop = (runs.unmasked_pairs_base - runs.unmasked_pairs_mt) * 100.0;
    report(
        "6 (unmasked verification preserved)",
        drop <= 3.0,
        &format!(
            "multi-task {:.2}% vs baseline {:.2}% on unmasked pairs (drop {drop:+.2} points)",
            runs.unmasked_pairs_mt * 100.0,
            runs.unmasked_pairs_base * 100.0
        ),
    );

    // ---- criterion 7: mask-usage accuracy >= 0.99 -------------------------
    report(
        "7 (mask-usage accuracy)",
        runs.mask_usage_mt >= 0.99,
        &format!(
            "{:.4} over {} held-out faces at threshold 0.5",
            runs.mask_usage_mt, runs.mask_usage_faces
        ),
    );

    // ---- criterion 8: byte-identical repeat of run (b) --------------------
    {
        let repeat_ckpt = train_toy(root, "run_mt_repeat", 0.5, 1.0, &data);
        let log_a = fs::read(root.join("run_mt/train_log.csv")).unwrap();
        let log_b = fs::read(root.join("run_mt_repeat/train_log.csv")).unwrap();
        let ck_a = fs::read(&ckpt_mt).unwrap();
        let ck_b = fs::read(&repeat_ckpt).unwrap();
        let mut periodic_ok = true;
        for step in [500u64, 1000, 1500, 2000] {
            let name = format!("ckpt_step_{step:07}.ckpt");
            let a = fs::read(root.join("run_mt").join(&name)).unwrap();
            let b = fs::read(root.join("run_mt_repeat").join(&name)).unwrap();
            periodic_ok &= a == b;
        }
        report(
            "8 (training determinism)",
            log_a == log_b && ck_a == ck_b && periodic_ok,
            &format!(
                "logs identical: {}; final checkpoints identical: {}; periodic checkpoints identical: {periodic_ok}",
                log_a == log_b,
                ck_a == ck_b
            ),
        );
    }

    // descent sanity on the multi-task log: late-window mean well below the
    // early-window mean
    let log = fs::read_to_string(root.join("run_mt/train_log.csv")).unwrap();
    let totals: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let early: f64 = totals[..200].iter().sum::<f64>() / 200.0;
    let late: f64 = totals[1800..].iter().sum::<f64>() / (totals.len() - 1800) as f64;
    assert!(
        late < 0.5 * early,
        "descent sanity: late mean {late:.3} not below half of early mean {early:.3}"
    );
}
