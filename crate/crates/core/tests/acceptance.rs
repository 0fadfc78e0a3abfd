//! Acceptance checks for the distillation pipeline. Each test verifies one
//! numbered criterion and prints a single machine-readable verdict line
//! (visible under --nocapture, and on any failure).

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use srdistill_core::data_prep::{
    prepare_corpus, save_dataset, DatasetManifest, DatasetMeta, FileRecord, GroupRecord,
    PatchGroup, MANIFEST_SCHEMA_VERSION,
};
use srdistill_core::harness::{
    reduction_stats, run_grid, DatasetVariant, ExperimentSpec, TestsetSpec,
    FULL_SCALE_REFERENCE_REDUCTION_PCT,
};
use srdistill_core::latent_distill::{
    build_toy_generator, decode_set, init_latent, latent_distill, LatentConfig,
};
use srdistill_core::matching::{grad_match_loss, MatchMode};
use srdistill_core::metrics::{psnr, ssim, PSNR_CAP_DB};
use srdistill_core::models::{
    build_model, smoothed, train, ArchConfig, Architecture, GradientVector, TrainSchedule,
};
use srdistill_core::pixel_distill::{distill, DistillConfig, InitStrategy};
use srdistill_core::resize::{resize_to, DegradationConfig};
use srdistill_core::rng;
use srdistill_core::ImageTensor;

const PSNR_EXACTNESS_DB: f64 = 1e-6;
const ORACLE_AGREEMENT: f64 = 1e-9;
const ALGEBRA_INVARIANCE: f64 = 1e-9;
const GRADIENT_RELATIVE: f64 = 1e-3;
const FIRST_STEP_CEILING: f64 = 1e-6;
const INIT_GAP_DB: f64 = 5.0;
const LATENT_TRAIL_DB: f64 = 0.2;
const REUSE_WINDOW_DB: f64 = 3.0;
const REDUCTION_PCT: f64 = 97.50;
const REDUCTION_PCT_TOL: f64 = 0.01;
const RERUN_DRIFT: f64 = 1e-6;

fn verdict(number: usize, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {number} {tag} {name}: {detail}");
    assert!(pass, "acceptance criterion {number} failed: {detail}");
}

// Shared toy corpus: a multi-octave master texture with a slow frequency
// warp; images are translated crops, so held-out crops share statistics
// with the training set while no small subset covers all of them.

fn field(y: f64, x: f64, c: usize) -> f64 {
    let u = 0.8 * x + 0.6 * y;
    let w = 0.6 * x - 0.8 * y;
    let warp = 1.0 + 0.6 * ((0.017 * x).sin() * (0.013 * y).cos());
    let mut v = 0.5;
    for (k, a) in [0.16, 0.13, 0.10].into_iter().enumerate() {
        let f = 0.14 * (1 << k) as f64 * warp;
        v += a * 0.5 * ((f * u + 0.7 * c as f64).sin() + (f * w + 1.3 * k as f64).cos());
    }
    v.clamp(0.0, 1.0)
}

fn crop_at(h: usize, w: usize, oy: usize, ox: usize) -> ImageTensor {
    ImageTensor::from_fn(h, w, 3, |y, x, c| {
        (field((y + oy) as f64, (x + ox) as f64, c) * 255.0).round() / 255.0
    })
}

fn write_corpus(dir: &Path, count: usize, size: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        crop_at(size, size, i * 29, i * 13)
            .save_png(&dir.join(format!("img{i}.png")))
            .unwrap();
    }
}

fn write_heldout(dir: &Path, count: usize, size: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        crop_at(size, size, i * 29 + 17, i * 13 + 29)
            .save_png(&dir.join(format!("t{i}.png")))
            .unwrap();
    }
}

fn prepared_corpus(tmp: &Path, images: usize) -> std::path::PathBuf {
    let raw = tmp.join("raw");
    write_corpus(&raw, images, 48);
    let groups = prepare_corpus(&raw, &DegradationConfig::bicubic(2), 16, 16).unwrap();
    let meta =
        DatasetMeta { corpus_name: "toy".into(), scale: 2, sub_image_size: 16, stride: 16 };
    let dir = tmp.join("prepared");
    save_dataset(&groups, &meta, &dir).unwrap();
    dir
}

fn heldout_spec(tmp: &Path, images: usize, testsize: usize, testcount: usize) -> ExperimentSpec {
    let data_dir = prepared_corpus(tmp, images);
    let test_dir = tmp.join("test");
    write_heldout(&test_dir, testcount, testsize);
    let mut spec = ExperimentSpec::desk(
        "acceptance",
        data_dir,
        vec![TestsetSpec { name: "held_out".into(), dir: test_dir }],
    );
    spec.arch = ArchConfig { srcnn_widths: [16, 8], ..Default::default() };
    spec.train.steps = 1600;
    spec.train.batch_size = 4;
    spec.train.patch_size = 16;
    spec.train.learning_rate = 2e-3;
    spec.pretrain.steps = 0;
    spec.rng_seed = 11;
    spec
}

fn random_image(size: usize, seed: u64) -> ImageTensor {
    let mut r = rng::stream(seed, &[0x6d65_7472]);
    ImageTensor::from_fn(size, size, 3, |_, _, _| r.random_range(0.0..1.0))
}

fn psnr_oracle(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..a.channels() {
                let d = a.data()[[y, x, c]] - b.data()[[y, x, c]];
                sum += d * d;
                n += 1.0;
            }
        }
    }
    let mse = sum / n;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

fn ssim_oracle(a: &ImageTensor, b: &ImageTensor) -> f64 {
    const WINDOW: usize = 11;
    const SIGMA: f64 = 1.5;
    let center = (WINDOW - 1) as f64 / 2.0;
    let raw: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let norm: f64 = raw.iter().sum();
    let g: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);

    let mut scores = Vec::new();
    for c in 0..a.channels() {
        for top in 0..=a.height() - WINDOW {
            for left in 0..=a.width() - WINDOW {
                let mut mu_x = 0.0;
                let mut mu_y = 0.0;
                let mut xx = 0.0;
                let mut yy = 0.0;
                let mut xy = 0.0;
                for dy in 0..WINDOW {
                    for dx in 0..WINDOW {
                        let wgt = g[dy] * g[dx];
                        let x = a.data()[[top + dy, left + dx, c]];
                        let y = b.data()[[top + dy, left + dx, c]];
                        mu_x += wgt * x;
                        mu_y += wgt * y;
                        xx += wgt * x * x;
                        yy += wgt * y * y;
                        xy += wgt * x * y;
                    }
                }
                scores.push(
                    ((2.0 * mu_x * mu_y + c1) * (2.0 * (xy - mu_x * mu_y) + c2))
                        / ((mu_x * mu_x + mu_y * mu_y + c1)
                            * ((xx - mu_x * mu_x) + (yy - mu_y * mu_y) + c2)),
                );
            }
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[test]
fn criterion_01_metric_exactness() {
    let start = std::time::Instant::now();
    let a = ImageTensor::constant(24, 24, 3, 0.2);
    let b = ImageTensor::constant(24, 24, 3, 0.3);
    let twenty = psnr(&a, &b, 1.0).unwrap();
    let identical = ssim(&a, &a, 11, 0.01, 0.03).unwrap();

    let mut worst_psnr = 0.0f64;
    let mut worst_ssim = 0.0f64;
    for pair in 0..20 {
        let x = random_image(24, 100 + pair);
        let y = random_image(24, 200 + pair);
        worst_psnr = worst_psnr.max((psnr(&x, &y, 1.0).unwrap() - psnr_oracle(&x, &y)).abs());
        worst_ssim =
            worst_ssim.max((ssim(&x, &y, 11, 0.01, 0.03).unwrap() - ssim_oracle(&x, &y)).abs());
    }

    let elapsed = start.elapsed().as_secs_f64();
    let pass = (twenty - 20.0).abs() <= PSNR_EXACTNESS_DB
        && identical == 1.0
        && worst_psnr <= ORACLE_AGREEMENT
        && worst_ssim <= ORACLE_AGREEMENT
        && elapsed < 10.0;
    verdict(
        1,
        "metric exactness",
        pass,
        &format!(
            "uniform-0.1 psnr {twenty:.8} dB, self ssim {identical}, oracle gaps psnr {worst_psnr:.2e} ssim {worst_ssim:.2e}, {elapsed:.1} s"
        ),
    );
}

#[test]
fn criterion_02_matching_algebra() {
    let layers = vec![vec![1.0, 0.0, 2.0], vec![0.0, 3.0], vec![4.0, -1.0, 0.5, 2.0]];
    let names: Vec<String> = (0..layers.len()).map(|i| format!("layer{i}")).collect();
    let base = GradientVector { layer_names: names.clone(), layers: layers.clone() };

    let identical = grad_match_loss(&base, &base, MatchMode::Layerwise).unwrap();

    let ortho_layers = vec![vec![0.0, 5.0, 0.0], vec![7.0, 0.0], vec![1.0, 4.0, 0.0, 0.0]];
    let ortho = GradientVector { layer_names: names.clone(), layers: ortho_layers };
    let orthogonal = grad_match_loss(&base, &ortho, MatchMode::Layerwise).unwrap();

    let neg = GradientVector {
        layer_names: names.clone(),
        layers: layers.iter().map(|l| l.iter().map(|v| -v).collect()).collect(),
    };
    let negated = grad_match_loss(&base, &neg, MatchMode::Layerwise).unwrap();

    let scaled = GradientVector {
        layer_names: names,
        layers: layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.iter().map(|v| v * (0.5 + i as f64 * 3.0)).collect())
            .collect(),
    };
    let invariance =
        (grad_match_loss(&base, &scaled, MatchMode::Layerwise).unwrap() - identical).abs();

    let n = base.layers.len() as f64;
    let pass = identical == 0.0
        && orthogonal == n
        && negated == 2.0 * n
        && invariance <= ALGEBRA_INVARIANCE;
    verdict(
        2,
        "matching algebra",
        pass,
        &format!(
            "identical {identical}, orthogonal {orthogonal} (layers {n}), negated {negated}, scaling drift {invariance:.2e}"
        ),
    );
}

#[test]
fn criterion_03_gradient_fidelity() {
    let start = std::time::Instant::now();
    let mut model = build_model(Architecture::Srcnn, 2, &ArchConfig::default(), 77).unwrap();
    let mut mk = rng::stream(41, &[0x6772_6164]);
    let lr = ArrayD::from_shape_fn(IxDyn(&[2, 3, 8, 8]), |_| mk.random_range(0.1..0.9));
    let hr = ArrayD::from_shape_fn(IxDyn(&[2, 3, 16, 16]), |_| mk.random_range(0.1..0.9));
    let grads = model.flat_gradient(&lr, &hr).unwrap();

    let loss_of = |m: &srdistill_core::models::SrModel| -> f64 {
        let pred = m.forward(&lr).unwrap();
        pred.iter().zip(hr.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / hr.len() as f64
    };

    let mut picker = rng::stream(42, &[0x7069_636b]);
    let mut worst = 0.0f64;
    const STEP: f64 = 1e-5;
    for _ in 0..12 {
        let li = picker.random_range(0..grads.layers.len());
        let pi = picker.random_range(0..grads.layers[li].len());
        let analytic = grads.layers[li][pi];
        let original = model.params[li].value.as_slice().unwrap()[pi];
        model.params[li].value.as_slice_mut().unwrap()[pi] = original + STEP;
        let plus = loss_of(&model);
        model.params[li].value.as_slice_mut().unwrap()[pi] = original - STEP;
        let minus = loss_of(&model);
        model.params[li].value.as_slice_mut().unwrap()[pi] = original;
        let numeric = (plus - minus) / (2.0 * STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst <= GRADIENT_RELATIVE && elapsed < 60.0;
    verdict(
        3,
        "gradient fidelity",
        pass,
        &format!("12 coordinates, worst relative gap {worst:.2e}, {elapsed:.1} s"),
    );
}

#[test]
fn criterion_04_first_step_zero() {
    let groups = vec![PatchGroup {
        source_id: "only".into(),
        pseudo_label: 0,
        sub_images: vec![crop_at(12, 12, 5, 9)],
        origin_offsets: vec![(0, 0)],
    }];
    let config = DistillConfig {
        iterations: 1,
        synth_size: 12,
        batch_real: 1,
        init: InitStrategy::Downscale,
        rng_seed: 4,
        ..Default::default()
    };
    let arch = ArchConfig { srcnn_widths: [4, 3], srcnn_kernels: [5, 3, 3], ..Default::default() };
    let factory = move |s: u64| build_model(Architecture::Srcnn, 2, &arch, s);
    let (_, history) = distill(&groups, 2, &config, &factory).unwrap();
    let first = history.losses[0];
    verdict(
        4,
        "first step zero",
        first < FIRST_STEP_CEILING,
        &format!("iteration-1 matching loss {first:.3e}"),
    );
}

#[test]
fn criterion_05_downscale_init_beats_noise_init() {
    let start = std::time::Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = heldout_spec(tmp.path(), 8, 16, 2);
    spec.variants = vec![DatasetVariant::SynPixelDownscale, DatasetVariant::SynPixelNoise];
    spec.distill.iterations = 60;
    spec.distill.synth_size = 16;
    spec.distill.batch_real = 2;
    spec.distill.synth_lr = 0.01;

    let report = run_grid(&spec, &tmp.path().join("out")).unwrap();
    let downscale = report
        .mean_psnr(DatasetVariant::SynPixelDownscale.name(), "srcnn", 2, "held_out")
        .unwrap();
    let noise =
        report.mean_psnr(DatasetVariant::SynPixelNoise.name(), "srcnn", 2, "held_out").unwrap();
    let gap = downscale - noise;
    let elapsed = start.elapsed().as_secs_f64();
    let pass = gap >= INIT_GAP_DB && elapsed < 1800.0;
    verdict(
        5,
        "downscale init beats noise init",
        pass,
        &format!(
            "downscale {downscale:.2} dB vs noise {noise:.2} dB, gap {gap:.2} dB, {elapsed:.0} s"
        ),
    );
}

#[test]
fn criterion_06_distillation_progress() {
    let groups: Vec<PatchGroup> = (0..2)
        .map(|i| PatchGroup {
            source_id: format!("img{i}"),
            pseudo_label: i,
            sub_images: (0..3).map(|j| crop_at(12, 12, i * 31 + j * 7, i * 17 + j * 11)).collect(),
            origin_offsets: (0..3).map(|j| (j * 7, j * 11)).collect(),
        })
        .collect();
    let pixel_config = DistillConfig {
        iterations: 1000,
        synth_size: 12,
        batch_real: 2,
        synth_lr: 0.05,
        reset_interval: 1000,
        init: InitStrategy::Downscale,
        rng_seed: 6,
        ..Default::default()
    };
    let arch = ArchConfig { srcnn_widths: [4, 3], srcnn_kernels: [5, 3, 3], ..Default::default() };
    let factory = move |s: u64| build_model(Architecture::Srcnn, 2, &arch, s);
    let (_, pixel_history) = distill(&groups, 2, &pixel_config, &factory).unwrap();
    let pixel_smooth = smoothed(&pixel_history.losses, 50);
    let (pixel_early, pixel_late) = (pixel_smooth[49], pixel_smooth[999]);

    let latent_groups: Vec<PatchGroup> = (0..2)
        .map(|i| PatchGroup {
            source_id: format!("img{i}"),
            pseudo_label: i,
            sub_images: vec![crop_at(16, 16, 40 + i * 23, 60 + i * 19)],
            origin_offsets: vec![(0, 0)],
        })
        .collect();
    let generator = build_toy_generator(8, 16, 3).unwrap();
    let latent_config = LatentConfig {
        iterations: 1000,
        synth_lr: 1e-2,
        batch_real: 2,
        reset_interval: 1000,
        inversion_steps: 0,
        tune_generator: false,
        rng_seed: 7,
        ..Default::default()
    };
    let arch2 = ArchConfig { srcnn_widths: [4, 3], srcnn_kernels: [5, 3, 3], ..Default::default() };
    let factory2 = move |s: u64| build_model(Architecture::Srcnn, 2, &arch2, s);
    let (_, latent_history) =
        latent_distill(&latent_groups, 2, &latent_config, &generator, &factory2).unwrap();
    let latent_smooth = smoothed(&latent_history.losses, 50);
    let (latent_early, latent_late) = (latent_smooth[49], latent_smooth[999]);

    let pass = pixel_late <= pixel_early && latent_late <= latent_early;
    verdict(
        6,
        "distillation progress",
        pass,
        &format!(
            "pixel smoothed loss {pixel_early:.3e} -> {pixel_late:.3e}, latent {latent_early:.3e} -> {latent_late:.3e}"
        ),
    );
}

#[test]
fn criterion_07_latent_matches_inversion_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = heldout_spec(tmp.path(), 6, 16, 4);
    spec.variants = vec![DatasetVariant::InversionBaseline, DatasetVariant::SynLatent];
    spec.latent_dim = 32;
    spec.generator_out_size = 16;
    spec.pretrain.steps = 300;
    spec.latent.inversion_steps = 250;
    spec.latent.tune_generator = true;
    spec.latent.iterations = 20;
    spec.latent.synth_lr = 5e-4;
    spec.latent.batch_real = 2;

    let report = run_grid(&spec, &tmp.path().join("out")).unwrap();
    let inversion = report
        .mean_psnr(DatasetVariant::InversionBaseline.name(), "srcnn", 2, "held_out")
        .unwrap();
    let latent =
        report.mean_psnr(DatasetVariant::SynLatent.name(), "srcnn", 2, "held_out").unwrap();
    let pass = latent >= inversion - LATENT_TRAIL_DB;
    verdict(
        7,
        "latent pathway tracks inversion baseline",
        pass,
        &format!("latent {latent:.2} dB vs inversion {inversion:.2} dB"),
    );
}

#[test]
fn criterion_08_inversion_beats_random_latents() {
    let start = std::time::Instant::now();
    let groups: Vec<PatchGroup> = (0..3)
        .map(|i| PatchGroup {
            source_id: format!("img{i}"),
            pseudo_label: i,
            sub_images: vec![crop_at(32, 32, i * 37, i * 21)],
            origin_offsets: vec![(0, 0)],
        })
        .collect();
    let generator = build_toy_generator(32, 32, 9).unwrap();
    let set = init_latent(&groups, &generator, 1, 200, false, 13).unwrap();
    let decoded = decode_set(&set).unwrap();

    let mut all_pass = true;
    let mut lines = Vec::new();
    for group in &groups {
        let target = resize_to(&group.sub_images[0], 32, 32).unwrap();
        let inverted = psnr(&decoded[&group.pseudo_label][0], &target, 1.0).unwrap();
        let mut best_random = f64::NEG_INFINITY;
        for k in 0u64..16 {
            let mut zr = rng::stream(900 + group.pseudo_label as u64, &[0x7262_6573, k]);
            let z: Vec<f64> = (0..32).map(|_| zr.random_range(-1.0..1.0)).collect();
            let img = set.generator.decode(&z).unwrap();
            best_random = best_random.max(psnr(&img, &target, 1.0).unwrap());
        }
        if inverted < best_random {
            all_pass = false;
        }
        lines.push(format!(
            "label {} inverted {inverted:.2} vs best random {best_random:.2}",
            group.pseudo_label
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = all_pass && elapsed < 300.0;
    verdict(
        8,
        "inversion beats random latents",
        pass,
        &format!("{} ({elapsed:.0} s)", lines.join("; ")),
    );
}

#[test]
fn criterion_09_cross_scale_reuse() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = heldout_spec(tmp.path(), 6, 16, 4);
    spec.variants = vec![DatasetVariant::DownscaledBaseline, DatasetVariant::SynLatent];
    spec.train_scales = vec![4];
    spec.train.steps = 800;
    spec.latent_dim = 32;
    spec.generator_out_size = 16;
    spec.pretrain.steps = 300;
    spec.latent.inversion_steps = 250;
    spec.latent.tune_generator = true;
    spec.latent.iterations = 20;
    spec.latent.synth_lr = 5e-4;
    spec.latent.batch_real = 2;
    spec.distill.synth_size = 16;

    let out = tmp.path().join("out");
    let report = run_grid(&spec, &out).unwrap();

    let all_finite = report.cells.iter().all(|c| {
        c.scale == 4
            && c.metrics
                .as_ref()
                .map(|m| m.mean_psnr_db.is_finite() && m.mean_ssim.is_finite())
                .unwrap_or(false)
    });
    let artifacts_at_two = spec.variants.iter().all(|v| {
        let rel = &report.artifacts[v.name()];
        let manifest: DatasetManifest = serde_json::from_str(
            &std::fs::read_to_string(out.join(rel).join("manifest.json")).unwrap(),
        )
        .unwrap();
        manifest.scale == 2
    });

    let dbase = report
        .mean_psnr(DatasetVariant::DownscaledBaseline.name(), "srcnn", 4, "held_out")
        .unwrap();
    let latent =
        report.mean_psnr(DatasetVariant::SynLatent.name(), "srcnn", 4, "held_out").unwrap();
    let gap = (latent - dbase).abs();
    let pass = all_finite && artifacts_at_two && gap <= REUSE_WINDOW_DB;
    verdict(
        9,
        "cross scale reuse",
        pass,
        &format!(
            "4x cells finite {all_finite}, artifacts stored at 2x {artifacts_at_two}, latent {latent:.2} dB vs downscaled {dbase:.2} dB (|gap| {gap:.2} dB)"
        ),
    );
}

fn fixture_manifest(name: &str, groups: usize, per_group: usize, size: usize) -> DatasetManifest {
    let group_records: Vec<GroupRecord> = (0..groups)
        .map(|label| GroupRecord {
            source_id: format!("src{label}"),
            pseudo_label: label,
            files: (0..per_group)
                .map(|i| FileRecord {
                    path: format!("g{label}/s{i}.png"),
                    sha256: String::new(),
                    bytes: (size * size * 3) as u64,
                })
                .collect(),
            offsets: (0..per_group).map(|i| (0, i)).collect(),
        })
        .collect();
    DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        corpus_name: name.into(),
        scale: 2,
        sub_image_size: size,
        stride: size,
        groups: group_records,
    }
}

#[test]
fn criterion_10_reduction_accounting() {
    let original = fixture_manifest("full", 40, 800, 16);
    let synthetic = fixture_manifest("condensed", 40, 20, 16);
    let stats = reduction_stats(&original, &synthetic);
    let pass = (stats.count_reduction_pct - REDUCTION_PCT).abs() <= REDUCTION_PCT_TOL
        && stats.full_scale_reference_pct == FULL_SCALE_REFERENCE_REDUCTION_PCT;
    verdict(
        10,
        "reduction accounting",
        pass,
        &format!(
            "32000 -> 800 sub-images, count reduction {:.2}%, reference {:.2}% recorded",
            stats.count_reduction_pct, stats.full_scale_reference_pct
        ),
    );
}

#[test]
fn criterion_11_reruns_are_identical() {
    let groups: Vec<PatchGroup> = (0..2)
        .map(|i| PatchGroup {
            source_id: format!("img{i}"),
            pseudo_label: i,
            sub_images: vec![crop_at(16, 16, i * 41, i * 23)],
            origin_offsets: vec![(0, 0)],
        })
        .collect();
    let degradation = DegradationConfig::bicubic(2);
    let schedule = TrainSchedule {
        steps: 30,
        batch_size: 2,
        patch_size: 8,
        rng_seed: 21,
        ..Default::default()
    };
    let arch = ArchConfig { srcnn_widths: [4, 3], srcnn_kernels: [5, 3, 3], ..Default::default() };
    let t1 = train(
        build_model(Architecture::Srcnn, 2, &arch, 1).unwrap(),
        &groups,
        &degradation,
        &schedule,
    )
    .unwrap();
    let t2 = train(
        build_model(Architecture::Srcnn, 2, &arch, 1).unwrap(),
        &groups,
        &degradation,
        &schedule,
    )
    .unwrap();
    let train_drift = history_drift(&t1.1, &t2.1);

    let config = DistillConfig {
        iterations: 15,
        synth_size: 12,
        batch_real: 2,
        rng_seed: 8,
        ..Default::default()
    };
    let arch2 = arch.clone();
    let factory = move |s: u64| build_model(Architecture::Srcnn, 2, &arch2, s);
    let d1 = distill(&groups, 2, &config, &factory).unwrap();
    let d2 = distill(&groups, 2, &config, &factory).unwrap();
    let distill_drift = history_drift(&d1.1.losses, &d2.1.losses);

    let generator = build_toy_generator(8, 16, 2).unwrap();
    let s1 = init_latent(&groups, &generator, 1, 25, false, 5).unwrap();
    let s2 = init_latent(&groups, &generator, 1, 25, false, 5).unwrap();
    let codes_equal = s1.codes == s2.codes;

    let pass = train_drift <= RERUN_DRIFT && distill_drift <= RERUN_DRIFT && codes_equal;
    verdict(
        11,
        "reruns are identical",
        pass,
        &format!(
            "train drift {train_drift:.2e}, distill drift {distill_drift:.2e}, codes equal {codes_equal}"
        ),
    );
}

fn history_drift(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
