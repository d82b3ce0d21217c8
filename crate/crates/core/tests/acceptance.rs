//! Acceptance suite: nine scaled-down checks that gate the toolbox.
//!
//! Each criterion is one test printing a single verdict line (run with
//! `--nocapture` to see them); the assertion behind the verdict is the gate.
//! The two training experiments (criteria 5 and 6) are stochastic by nature,
//! so their seeds are pinned here and their budgets noted inline.

use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use highdan::encoder::{count_params, pyramid_fuse};
use highdan::losses::{self, DiceMode};
use highdan::metrics::{ConfusionMatrix, F1Mode};
use highdan::nn::{Graph, Tensor};
use highdan::raster::{load_scene, save_scene, synth_scene_pair, Scene, ShiftSpec, SynthSpec};
use highdan::trainer::{self, infer_full_scene, load_checkpoint, Model, ModelSpec, TrainConfig};

fn gate(criterion: usize, passed: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} - {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {criterion} failed: {detail}");
}

fn random_tensor(
    rng: &mut ChaCha20Rng,
    dim: (usize, usize, usize, usize),
    lo: f64,
    hi: f64,
) -> Tensor {
    Tensor::from_shape_fn(dim, |_| rng.random_range(lo..hi))
}

/// Labels in `1..=classes` with roughly 20 % ignored pixels, at least one
/// pixel labeled.
fn random_labels(rng: &mut ChaCha20Rng, classes: usize, h: usize, w: usize) -> Array3<u8> {
    let mut labels = Array3::from_shape_fn((1, h, w), |_| {
        if rng.random_bool(0.2) {
            0u8
        } else {
            rng.random_range(1..=classes) as u8
        }
    });
    labels[[0, 0, 0]] = 1;
    labels
}

// --- criterion 1: metric oracle equivalence ---------------------------------

#[test]
fn criterion_1_metric_oracle_equivalence() {
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let mut max_err = 0.0_f64;
    let mut degenerate = 1usize;
    // Fully ignored input: every metric must be undefined, matching the
    // brute-force view that there is nothing to count.
    let empty = ConfusionMatrix::new(3)
        .unwrap()
        .accumulate(
            Array2::from_elem((4, 4), 1u8).view(),
            Array2::zeros((4, 4)).view(),
            0,
        )
        .unwrap();
    assert!(empty.overall_accuracy().is_err() && empty.mean_iou().is_err());
    for _ in 0..200 {
        let classes = rng.random_range(2..=6usize);
        let h = rng.random_range(1..=8usize);
        let w = rng.random_range(1..=8usize);
        let gt = Array2::from_shape_fn((h, w), |_| {
            if rng.random_bool(0.15) {
                0u8
            } else {
                rng.random_range(1..=classes) as u8
            }
        });
        let pred = Array2::from_shape_fn((h, w), |_| rng.random_range(1..=classes) as u8);
        let cm = ConfusionMatrix::new(classes)
            .unwrap()
            .accumulate(pred.view(), gt.view(), 0)
            .unwrap();

        // Brute-force per-pixel recount, independent of the matrix path.
        let mut labeled = 0u64;
        let mut hits = 0u64;
        let mut tp = vec![0u64; classes];
        let mut in_gt = vec![0u64; classes];
        let mut in_pred = vec![0u64; classes];
        for (p, g) in pred.iter().zip(gt.iter()) {
            if *g == 0 {
                continue;
            }
            labeled += 1;
            if p == g {
                hits += 1;
                tp[*g as usize - 1] += 1;
            }
            in_gt[*g as usize - 1] += 1;
            in_pred[*p as usize - 1] += 1;
        }
        if labeled == 0 {
            assert!(cm.overall_accuracy().is_err(), "OA defined with no pixels");
            assert!(cm.mean_iou().is_err(), "mIoU defined with no pixels");
            degenerate += 1;
            continue;
        }
        let oa = hits as f64 / labeled as f64;
        let mut iou_sum = 0.0;
        let mut f1_sum = 0.0;
        let mut supported = 0usize;
        for k in 0..classes {
            if in_gt[k] + in_pred[k] == 0 {
                continue;
            }
            supported += 1;
            iou_sum += tp[k] as f64 / (in_gt[k] + in_pred[k] - tp[k]) as f64;
            f1_sum += 2.0 * tp[k] as f64 / (in_gt[k] + in_pred[k]) as f64;
        }
        let pairs = [
            (oa, cm.overall_accuracy().unwrap()),
            (iou_sum / supported as f64, cm.mean_iou().unwrap().mean),
            (
                f1_sum / supported as f64,
                cm.mean_f1(F1Mode::Standard).unwrap().mean,
            ),
        ];
        for (want, got) in pairs {
            max_err = max_err.max((want - got).abs());
        }
    }
    gate(
        1,
        max_err < 1e-9,
        &format!(
            "OA/mIoU/mF1 equal a brute-force recount on 200 random cases, \
             max |diff| {max_err:.2e}; {degenerate} all-ignored cases undefined on both paths"
        ),
    );
}

// --- criterion 2: loss gradients vs central finite differences --------------

/// Relative error between an analytic gradient and a central finite
/// difference (step 1e-3), measured in the L2 norm over all entries.
fn fd_rel_error(x: &Tensor, analytic: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    let step = 1e-3;
    let mut probe = x.clone();
    let mut fd = Tensor::zeros(x.dim());
    let (n, c, h, w) = x.dim();
    for i in 0..n {
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let idx = [i, ch, r, col];
                    probe[idx] = x[idx] + step;
                    let up = f(&probe);
                    probe[idx] = x[idx] - step;
                    let down = f(&probe);
                    probe[idx] = x[idx];
                    fd[idx] = (up - down) / (2.0 * step);
                }
            }
        }
    }
    let diff = (&fd - analytic).mapv(|v| v * v).sum().sqrt();
    let scale = analytic
        .mapv(|v| v * v)
        .sum()
        .sqrt()
        .max(fd.mapv(|v| v * v).sum().sqrt());
    diff / scale.max(1e-12)
}

#[test]
fn criterion_2_loss_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    let mut errs: Vec<(String, f64)> = Vec::new();
    for &classes in &[2usize, 13] {
        let labels = random_labels(&mut rng, classes, 4, 4);

        let logits = random_tensor(&mut rng, (1, classes, 4, 4), -1.5, 1.5);
        let mce = losses::mce_with_grad(&logits, &labels, 0).unwrap();
        errs.push((
            format!("mce c={classes}"),
            fd_rel_error(&logits, &mce.grad, |x| {
                losses::mce_loss(x, &labels, 0).unwrap()
            }),
        ));

        let probs = random_tensor(&mut rng, (1, classes, 4, 4), 0.05, 0.95);
        for mode in [DiceMode::Macro, DiceMode::Global] {
            let (_, grad) = losses::dice_with_grad(&probs, &labels, 0, mode).unwrap();
            errs.push((
                format!("dice {mode:?} c={classes}"),
                fd_rel_error(&probs, &grad, |x| {
                    losses::dice_loss(x, &labels, 0, mode).unwrap()
                }),
            ));
        }

        let src = random_tensor(&mut rng, (1, 1, 4, 4), -2.0, 2.0);
        let tgt = random_tensor(&mut rng, (1, 1, 4, 4), -2.0, 2.0);
        let (_, g_src, g_tgt) = losses::lsgan_d_with_grad(&src, &tgt);
        errs.push((
            format!("lsgan_d src #{classes}"),
            fd_rel_error(&src, &g_src, |x| losses::lsgan_d_loss(x, &tgt)),
        ));
        errs.push((
            format!("lsgan_d tgt #{classes}"),
            fd_rel_error(&tgt, &g_tgt, |x| losses::lsgan_d_loss(&src, x)),
        ));
        let (_, g_gen) = losses::lsgan_g_with_grad(&tgt);
        errs.push((
            format!("lsgan_g #{classes}"),
            fd_rel_error(&tgt, &g_gen, losses::lsgan_g_loss),
        ));
    }
    let worst = errs
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .clone();
    gate(
        2,
        worst.1 < 1e-4,
        &format!(
            "{} gradient checks within tolerance; worst rel err {:.2e} ({}); {:.1} s",
            errs.len(),
            worst.1,
            worst.0,
            start.elapsed().as_secs_f64()
        ),
    );
}

// --- criterion 3: closed-form loss values ------------------------------------

#[test]
fn criterion_3_closed_form_loss_values() {
    let mut rng = ChaCha20Rng::seed_from_u64(303);
    let labels = random_labels(&mut rng, 2, 4, 4);
    // One-hot maps that either match the label exactly or always pick the
    // other class (ignored pixels get an arbitrary channel, excluded anyway).
    let one_hot = |hit: bool| {
        Tensor::from_shape_fn((1, 2, 4, 4), |(i, ch, r, c)| {
            let l = labels[[i, r, c]] as usize;
            let lit = if l == 0 {
                0
            } else if hit {
                l - 1
            } else {
                l % 2
            };
            if ch == lit {
                1.0
            } else {
                0.0
            }
        })
    };
    let perfect = one_hot(true);
    let disjoint = one_hot(false);
    let mut worst_perfect = 0.0_f64;
    let mut worst_disjoint = 0.0_f64;
    for mode in [DiceMode::Macro, DiceMode::Global] {
        let p = losses::dice_loss(&perfect, &labels, 0, mode).unwrap();
        let d = losses::dice_loss(&disjoint, &labels, 0, mode).unwrap();
        worst_perfect = worst_perfect.max(p.abs());
        worst_disjoint = worst_disjoint.max((d - 1.0).abs());
    }

    let labels13 = random_labels(&mut rng, 13, 4, 4);
    let uniform_mce = losses::mce_loss(&Tensor::zeros((1, 13, 4, 4)), &labels13, 0).unwrap();
    let mce_err = (uniform_mce - 13.0_f64.ln()).abs();

    let zeros = Tensor::zeros((1, 1, 4, 4));
    let d_mid = losses::lsgan_d_loss(&zeros, &zeros);
    let g_mid = losses::lsgan_g_loss(&zeros);
    let d_err = (d_mid - 0.5).abs();

    let passed =
        worst_perfect < 1e-9 && worst_disjoint < 1e-6 && mce_err < 1e-6 && d_err < 1e-9;
    assert!((g_mid - 0.25).abs() < 1e-9, "generator at zero scores: {g_mid}");
    gate(
        3,
        passed,
        &format!(
            "dice perfect {worst_perfect:.1e}, disjoint 1-{worst_disjoint:.1e}, \
             uniform 13-class MCE off ln13 by {mce_err:.1e}, \
             zero-score critic loss off 0.5 by {d_err:.1e}"
        ),
    );
}

// --- criterion 4: shape contract sweep ---------------------------------------

#[test]
fn criterion_4_shape_contract_sweep() {
    let start = Instant::now();
    let spec = ModelSpec {
        modalities: vec![("hsi".into(), 30), ("msi".into(), 4), ("sar".into(), 2)],
        num_classes: 13,
        ignore_index: 0,
        class_names: (1..=13).map(|i| format!("class_{i}")).collect(),
        head_width: 64,
        stream_widths: vec![48, 96, 192, 384],
        blocks_per_stage: 4,
        decoder_widths: vec![256, 128, 64],
        d_feat_widths: vec![256, 128, 64],
        d_cat_widths: vec![64, 128, 256, 512],
        enable_feature_da: true,
    };
    let mut model = Model::new(&spec, 404).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(405);
    let mut tiles_done = Vec::new();
    for &tile in &[32usize, 64, 128, 256] {
        let mut g = Graph::new(false);
        let mut fused_all = Vec::new();
        for (id, bands) in spec.modalities.clone() {
            let x = g.input(random_tensor(&mut rng, (1, bands, tile, tile), -1.0, 1.0));
            let pyramid = model
                .encoder
                .encode_modality_pyramid(&mut g, &mut model.heads, &mut model.hr, &id, x)
                .unwrap();
            let got: Vec<_> = pyramid.iter().map(|&v| g.value(v).dim()).collect();
            let want: Vec<_> = [48usize, 96, 192, 384]
                .iter()
                .enumerate()
                .map(|(s, &c)| (1, c, (tile / 4) >> s, (tile / 4) >> s))
                .collect();
            assert_eq!(got, want, "stream shapes at tile {tile} for {id}");
            let fused = pyramid_fuse(&mut g, &pyramid);
            assert_eq!(
                g.value(fused).dim(),
                (1, 720, tile / 4, tile / 4),
                "fused width at tile {tile} for {id}"
            );
            fused_all.push(fused);
        }
        let cat = g.concat_channels(&fused_all);
        assert_eq!(g.value(cat).dim(), (1, 2160, tile / 4, tile / 4));
        let logits = model.decoder.forward(&mut g, &mut model.dec, cat).unwrap();
        assert_eq!(g.value(logits).dim(), (1, 13, tile, tile));
        tiles_done.push(tile);
    }
    let secs = start.elapsed().as_secs_f64();
    gate(
        4,
        secs < 60.0,
        &format!(
            "tiles {tiles_done:?}: streams 48/96/192/384, fused 720 per modality \
             and 2160 over three, logits 13*tile*tile; {secs:.1} s"
        ),
    );
}

// --- criterion 5: overfit sanity ---------------------------------------------

#[test]
fn criterion_5_overfit_sanity() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        height: 256,
        width: 256,
        num_classes: 6,
        bands: vec![("hsi".into(), 8), ("msi".into(), 4), ("sar".into(), 2)],
        cells: 40,
        smooth_iters: 1,
        base_noise: 0.03,
        unlabeled_fraction: 0.05,
        sig_range: (0.15, 0.85),
    };
    let (scene, _) = synth_scene_pair(505, &ShiftSpec::default(), &spec).unwrap();
    let src_dir = dir.path().join("source");
    save_scene(&scene, &src_dir).unwrap();

    // 16 disjoint tiles, full-batch: one step per epoch, 200 steps total.
    let config: TrainConfig = serde_json::from_value(serde_json::json!({
        "source_dir": src_dir,
        "out_dir": dir.path().join("run"),
        "tile_size": 64,
        "batch_size": 16,
        "epochs": 200,
        "lr_segmenter": 2e-3,
        "pca_components": null,
        "enable_feature_da": false,
        "enable_category_da": false,
        "seed": 5,
        "head_width": 8,
        "stream_widths": [8, 16, 32, 64],
        "blocks_per_stage": 1,
        "decoder_widths": [32, 16, 8],
        "d_feat_widths": [8],
        "d_cat_widths": [8, 8, 8, 8],
    }))
    .unwrap();
    let (ckpt, trace) = trainer::fit(&config).unwrap();
    assert_eq!(trace.len(), 200);

    // 50-step moving average of the segmentation loss over the first 150
    // steps: every window shift must strictly decrease.
    let seg: Vec<f64> = trace.iter().map(|r| r.seg).collect();
    let ma: Vec<f64> = (0..=100)
        .map(|s| seg[s..s + 50].iter().sum::<f64>() / 50.0)
        .collect();
    let monotone = ma.windows(2).all(|w| w[1] < w[0]);

    let mut model = ckpt.model;
    let (pred, _) = infer_full_scene(&mut model, &scene, 64, 64, false).unwrap();
    let cm = ConfusionMatrix::new(spec.num_classes)
        .unwrap()
        .accumulate(pred.view(), scene.labels.view(), 0)
        .unwrap();
    let oa = cm.overall_accuracy().unwrap();
    let secs = start.elapsed().as_secs_f64();
    gate(
        5,
        oa >= 0.95 && monotone && secs <= 600.0,
        &format!(
            "training OA {oa:.4} after 200 full-batch steps, 50-step loss average \
             strictly decreasing over first 150 steps: {monotone}; {secs:.0} s (budget 600)"
        ),
    );
}

// --- criterion 6: domain adaptation efficacy ---------------------------------

/// Pinned seeds for the stochastic DA-gain experiment; each seeds the scene
/// layout, the shift draw, and the model initialization of one replicate.
const DA_SEEDS: [u64; 5] = [11, 23, 37, 59, 83];

/// Desk-scale training setup shared by the adapted run and the baseline.
/// Alignment weights well below the full-scale defaults keep the adversarial
/// gradient from swamping the segmentation signal at this model size.
fn da_config(
    src: &std::path::Path,
    tgt: &std::path::Path,
    out: &std::path::Path,
    seed: u64,
    adapt: bool,
) -> TrainConfig {
    serde_json::from_value(serde_json::json!({
        "source_dir": src,
        "target_dir": tgt,
        "out_dir": out,
        "tile_size": 64,
        "stride": 32,
        "batch_size": 8,
        "iterations": 300,
        "epochs": 1,
        "lr_segmenter": 1e-3,
        "lr_discriminator": 2e-4,
        "weights": {"lambda": 0.05, "mu": 0.05},
        "pca_components": null,
        "enable_feature_da": adapt,
        "enable_category_da": adapt,
        "seed": seed,
        "head_width": 8,
        "stream_widths": [8, 16],
        "blocks_per_stage": 1,
        "decoder_widths": [16, 16, 8],
        "d_feat_widths": [16, 8],
        "d_cat_widths": [8, 16, 32],
    }))
    .unwrap()
}

fn target_miou(model: &mut Model, scene: &Scene, apply_da: bool) -> f64 {
    let (pred, _) = infer_full_scene(model, scene, 64, 32, apply_da).unwrap();
    ConfusionMatrix::new(scene.num_classes)
        .unwrap()
        .accumulate(pred.view(), scene.labels.view(), 0)
        .unwrap()
        .mean_iou()
        .unwrap()
        .mean
}

#[test]
fn criterion_6_domain_adaptation_efficacy() {
    let start = Instant::now();
    let mut gaps = Vec::new();
    for &seed in &DA_SEEDS {
        let dir = tempfile::tempdir().unwrap();
        // Nearly clean source vs the mandated gain/offset/noise shift on the
        // target; the layouts stay shared (no prior skew) so the domains
        // differ radiometrically, not semantically.
        let spec = SynthSpec {
            height: 128,
            width: 128,
            num_classes: 6,
            bands: vec![("hsi".into(), 8), ("msi".into(), 4), ("sar".into(), 2)],
            cells: 24,
            smooth_iters: 1,
            base_noise: 0.01,
            unlabeled_fraction: 0.05,
            sig_range: (0.15, 0.85),
        };
        let shift = ShiftSpec {
            gain: (0.7, 1.3),
            offset: (-0.2, 0.2),
            noise_std: 0.05,
            skew: 0.0,
            seed: seed + 1,
        };
        let (src, tgt) = synth_scene_pair(seed, &shift, &spec).unwrap();
        let src_dir = dir.path().join("source");
        let tgt_dir = dir.path().join("target");
        save_scene(&src, &src_dir).unwrap();
        save_scene(&tgt, &tgt_dir).unwrap();

        let adapted = da_config(&src_dir, &tgt_dir, &dir.path().join("da"), seed, true);
        let baseline = da_config(&src_dir, &tgt_dir, &dir.path().join("base"), seed, false);
        let (ckpt_da, _) = trainer::fit(&adapted).unwrap();
        let (ckpt_base, _) = trainer::fit(&baseline).unwrap();

        let mut model_da = ckpt_da.model;
        let mut model_base = ckpt_base.model;
        let miou_da = target_miou(&mut model_da, &tgt, true);
        let miou_base = target_miou(&mut model_base, &tgt, false);
        println!(
            "  seed {seed}: target mIoU adapted {miou_da:.4} vs baseline {miou_base:.4} \
             (gap {:+.4})",
            miou_da - miou_base
        );
        gaps.push(miou_da - miou_base);
    }
    gaps.sort_by(|a, b| a.total_cmp(b));
    let median = gaps[gaps.len() / 2];
    gate(
        6,
        median >= 0.02,
        &format!(
            "median target-domain mIoU gain over 5 pinned seeds {median:+.4} \
             (needs >= +0.02); gaps {gaps:?}; {:.0} s",
            start.elapsed().as_secs_f64()
        ),
    );
}

// --- criterion 7: ablation lattice -------------------------------------------

#[test]
fn criterion_7_ablation_lattice() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        height: 64,
        width: 64,
        num_classes: 4,
        bands: vec![("hsi".into(), 6), ("msi".into(), 3), ("sar".into(), 2)],
        cells: 12,
        smooth_iters: 1,
        base_noise: 0.03,
        unlabeled_fraction: 0.05,
        sig_range: (0.15, 0.85),
    };
    let shift = ShiftSpec {
        gain: (0.9, 1.1),
        offset: (-0.05, 0.05),
        noise_std: 0.02,
        skew: 0.3,
        seed: 701,
    };
    let (src, tgt) = synth_scene_pair(700, &shift, &spec).unwrap();
    let src_dir = dir.path().join("source");
    let tgt_dir = dir.path().join("target");
    save_scene(&src, &src_dir).unwrap();
    save_scene(&tgt, &tgt_dir).unwrap();

    let mut ran = 0usize;
    for bits in 0..8u8 {
        let feature = bits & 1 != 0;
        let category = bits & 2 != 0;
        let dice = bits & 4 != 0;
        let out = dir.path().join(format!("run_{bits}"));
        let config: TrainConfig = serde_json::from_value(serde_json::json!({
            "source_dir": src_dir,
            "target_dir": tgt_dir,
            "out_dir": out,
            "tile_size": 32,
            "batch_size": 4,
            "epochs": 1,
            "iterations": 20,
            "pca_components": null,
            "enable_feature_da": feature,
            "enable_category_da": category,
            "enable_dice": dice,
            "seed": 7,
            "head_width": 4,
            "stream_widths": [4, 8],
            "blocks_per_stage": 1,
            "decoder_widths": [8, 8, 4],
            "d_feat_widths": [8, 4],
            "d_cat_widths": [4, 8],
        }))
        .unwrap();
        let (_, trace) = trainer::fit(&config).unwrap();
        assert_eq!(trace.len(), 20, "combination {bits} ran short");
        assert!(
            trace.iter().all(|r| r.total.is_finite()),
            "combination {bits} produced a non-finite loss"
        );

        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(config.out_dir.join("run_manifest.json")).unwrap(),
        )
        .unwrap();
        let logged: Vec<String> = manifest["active_modules"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap().to_string())
            .collect();
        let mut expected = vec!["encoder", "decoder", "mce"];
        if dice {
            expected.push("dice");
        }
        if feature {
            expected.push("feature_da");
        }
        if category {
            expected.push("category_da");
        }
        assert_eq!(logged, expected, "active modules for combination {bits}");
        ran += 1;
    }
    gate(
        7,
        ran == 8,
        "all 8 {feature, category, dice} combinations ran 20 iterations \
         with finite losses and logged their active modules",
    );
}

// --- criterion 8: determinism and persistence ---------------------------------

#[test]
fn criterion_8_determinism_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        height: 64,
        width: 64,
        num_classes: 4,
        bands: vec![("hsi".into(), 6), ("msi".into(), 3), ("sar".into(), 2)],
        cells: 12,
        smooth_iters: 1,
        base_noise: 0.03,
        unlabeled_fraction: 0.05,
        sig_range: (0.15, 0.85),
    };
    let shift = ShiftSpec {
        gain: (0.8, 1.2),
        offset: (-0.1, 0.1),
        noise_std: 0.03,
        skew: 0.5,
        seed: 801,
    };
    let (src, tgt) = synth_scene_pair(800, &shift, &spec).unwrap();
    let src_dir = dir.path().join("source");
    let tgt_dir = dir.path().join("target");
    save_scene(&src, &src_dir).unwrap();
    save_scene(&tgt, &tgt_dir).unwrap();

    let config_for = |out: &str| -> TrainConfig {
        serde_json::from_value(serde_json::json!({
            "source_dir": src_dir,
            "target_dir": tgt_dir,
            "out_dir": dir.path().join(out),
            "tile_size": 32,
            "batch_size": 4,
            "epochs": 1,
            "iterations": 12,
            "pca_components": 4,
            "seed": 123,
            "head_width": 4,
            "stream_widths": [4, 8],
            "blocks_per_stage": 1,
            "decoder_widths": [8, 8, 4],
            "d_feat_widths": [8, 4],
            "d_cat_widths": [4, 8],
        }))
        .unwrap()
    };
    let (ckpt, trace_a) = trainer::fit(&config_for("run_a")).unwrap();
    let (_, trace_b) = trainer::fit(&config_for("run_b")).unwrap();
    assert_eq!(trace_a.len(), trace_b.len());
    let mut max_trace_diff = 0.0_f64;
    for (a, b) in trace_a.iter().zip(&trace_b) {
        for (x, y) in [
            (a.seg, b.seg),
            (a.mce, b.mce),
            (a.dice, b.dice),
            (a.g_feat, b.g_feat),
            (a.g_cat, b.g_cat),
            (a.d_feat, b.d_feat),
            (a.d_cat, b.d_cat),
            (a.total, b.total),
        ] {
            max_trace_diff = max_trace_diff.max((x - y).abs());
        }
    }

    // Reload the written checkpoint and compare full-scene inference.
    let mut fresh = load_checkpoint(dir.path().join("run_a").join("checkpoint.ckpt"))
        .unwrap()
        .model;
    let mut trained = ckpt.model;
    let (pred_mem, probs_mem) = infer_full_scene(&mut trained, &tgt, 32, 32, true).unwrap();
    let (pred_disk, probs_disk) = infer_full_scene(&mut fresh, &tgt, 32, 32, true).unwrap();
    let ckpt_identical = pred_mem == pred_disk && probs_mem == probs_disk;

    // Scene round-trip through the on-disk format.
    let rt_dir = dir.path().join("roundtrip");
    save_scene(&tgt, &rt_dir).unwrap();
    let back = load_scene(&rt_dir).unwrap();
    let scene_identical = back == tgt;

    gate(
        8,
        max_trace_diff <= 1e-6 && ckpt_identical && scene_identical,
        &format!(
            "same-seed reruns match (max trace diff {max_trace_diff:.1e}), \
             checkpoint reload reproduces inference bit-for-bit: {ckpt_identical}, \
             scene round-trip bit-exact: {scene_identical}"
        ),
    );
}

// --- criterion 9: parameter accounting ----------------------------------------

#[test]
fn criterion_9_parameter_accounting() {
    let spec = ModelSpec {
        modalities: vec![("hsi".into(), 30), ("msi".into(), 4), ("sar".into(), 2)],
        num_classes: 13,
        ignore_index: 0,
        class_names: (1..=13).map(|i| format!("class_{i}")).collect(),
        head_width: 64,
        stream_widths: vec![48, 96, 192, 384],
        blocks_per_stage: 4,
        decoder_widths: vec![256, 128, 64],
        d_feat_widths: vec![256, 128, 64],
        d_cat_widths: vec![64, 128, 256, 512],
        enable_feature_da: true,
    };
    let model = Model::new(&spec, 0).unwrap();
    let segmenter = count_params(&[&model.heads, &model.hr, &model.dec]);
    let critics = count_params(&[&model.df, &model.dc]);
    let reference = 16.55e6;
    let deviation = (segmenter as f64 - reference) / reference * 100.0;
    gate(
        9,
        segmenter > 0,
        &format!(
            "default segmenter {segmenter} parameters ({:.2} M) vs 16.55 M reference: \
             {deviation:+.2}% (documented, not gated); critics add {critics} \
             for {} total",
            segmenter as f64 / 1e6,
            segmenter + critics
        ),
    );
}
