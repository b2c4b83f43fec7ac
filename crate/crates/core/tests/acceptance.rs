//! Acceptance suite. One test per criterion; each prints a pass/fail line
//! with the measured numbers. The desk-scale training criteria share one
//! pipeline run (built on first use), so the suite stays CPU-friendly.

use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use oct_restore::bscan::{BScan, ScanKind};
use oct_restore::checkpoint::hash_tensors;
use oct_restore::config::{NetworkConfig, PipelineConfig};
use oct_restore::dataset::generate_dataset;
use oct_restore::losses::{content_loss, gram, shadow_loss, style_loss, total_loss, LossWeights};
use oct_restore::metrics::{self, Roi, RoiLabel};
use oct_restore::nets::UNet;
use oct_restore::phantom::{apply_shadow, generate_phantom, layer_region, PhantomSpec, ShadowDepthMode, Vessel};
use oct_restore::pipeline::{calibrate_weights, evaluate, train_detector, train_processor};

// ---------------------------------------------------------------------------
// Independent brute-force oracles (naive double loops; no shared code with
// the implementations they check).
// ---------------------------------------------------------------------------

mod naive {
    /// Pixel fetch with replicated edges.
    fn at(img: &[Vec<f64>], r: i64, c: i64) -> f64 {
        let h = img.len() as i64;
        let w = img[0].len() as i64;
        let rr = if r < 0 { 0 } else if r >= h { h - 1 } else { r };
        let cc = if c < 0 { 0 } else if c >= w { w - 1 } else { c };
        img[rr as usize][cc as usize]
    }

    pub fn agm(img: &[Vec<f64>]) -> f64 {
        let h = img.len();
        let w = img[0].len();
        let mut total = 0.0;
        for r in 0..h {
            for c in 0..w {
                let gx = (at(img, r as i64, c as i64 + 1) - at(img, r as i64, c as i64 - 1)) / 2.0;
                let gy = (at(img, r as i64 + 1, c as i64) - at(img, r as i64 - 1, c as i64)) / 2.0;
                total += (gx * gx + gy * gy).sqrt();
            }
        }
        total / (h as f64 * w as f64) / 2.0f64.sqrt()
    }

    pub fn psnr_paper(proc_img: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
        let mut err = 0.0;
        let mut sig = 0.0;
        for r in 0..reference.len() {
            for c in 0..reference[0].len() {
                let d = reference[r][c] - proc_img[r][c];
                err += d * d;
                sig += reference[r][c] * reference[r][c];
            }
        }
        if err == 0.0 {
            return f64::INFINITY;
        }
        -10.0 * (err / sig).log10()
    }

    pub fn psnr_std(proc_img: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
        let h = reference.len();
        let w = reference[0].len();
        let mut err = 0.0;
        for r in 0..h {
            for c in 0..w {
                let d = reference[r][c] - proc_img[r][c];
                err += d * d;
            }
        }
        let mse = err / (h as f64 * w as f64);
        if mse == 0.0 {
            return f64::INFINITY;
        }
        -10.0 * mse.log10()
    }

    fn roi_stats(img: &[Vec<f64>], roi: (usize, usize, usize, usize)) -> (f64, f64) {
        let (r0, c0, rh, rw) = roi;
        let mut mean = 0.0;
        for r in r0..r0 + rh {
            for c in c0..c0 + rw {
                mean += img[r][c];
            }
        }
        mean /= (rh * rw) as f64;
        let mut var = 0.0;
        for r in r0..r0 + rh {
            for c in c0..c0 + rw {
                var += (img[r][c] - mean) * (img[r][c] - mean);
            }
        }
        (mean, var / (rh * rw) as f64)
    }

    pub fn cnr(
        img: &[Vec<f64>],
        tissue: &[(usize, usize, usize, usize)],
        background: (usize, usize, usize, usize),
    ) -> f64 {
        let (mu_b, var_b) = roi_stats(img, background);
        let mut total = 0.0;
        for roi in tissue {
            let (mu_r, var_r) = roi_stats(img, *roi);
            total += (mu_r - mu_b).abs() / (0.5 * (var_r + var_b)).sqrt();
        }
        total / tissue.len() as f64
    }

    pub fn ssim(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
        let win = 7usize;
        let h = x.len();
        let w = x[0].len();
        let c1 = 0.01f64 * 0.01;
        let c2 = 0.03f64 * 0.03;
        let np = (win * win) as f64;
        let mut total = 0.0;
        let mut count = 0;
        for r0 in 0..=(h - win) {
            for c0 in 0..=(w - win) {
                // Two-pass means then sample (co)variances.
                let mut mx = 0.0;
                let mut my = 0.0;
                for r in r0..r0 + win {
                    for c in c0..c0 + win {
                        mx += x[r][c];
                        my += y[r][c];
                    }
                }
                mx /= np;
                my /= np;
                let mut vx = 0.0;
                let mut vy = 0.0;
                let mut vxy = 0.0;
                for r in r0..r0 + win {
                    for c in c0..c0 + win {
                        vx += (x[r][c] - mx) * (x[r][c] - mx);
                        vy += (y[r][c] - my) * (y[r][c] - my);
                        vxy += (x[r][c] - mx) * (y[r][c] - my);
                    }
                }
                vx /= np - 1.0;
                vy /= np - 1.0;
                vxy /= np - 1.0;
                total += ((2.0 * mx * my + c1) * (2.0 * vxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    pub fn ilc(
        img: &[Vec<f64>],
        free: &[(usize, usize, usize, usize)],
        shadowed: &[(usize, usize, usize, usize)],
    ) -> f64 {
        let pooled = |rois: &[(usize, usize, usize, usize)]| {
            let mut sum = 0.0;
            let mut n = 0.0;
            for &(r0, c0, rh, rw) in rois {
                for r in r0..r0 + rh {
                    for c in c0..c0 + rw {
                        sum += img[r][c];
                        n += 1.0;
                    }
                }
            }
            sum / n
        };
        let i1 = pooled(free);
        let i2 = pooled(shadowed);
        ((i1 - i2) / (i1 + i2)).abs()
    }
}

fn random_scan(seed: u64) -> (BScan, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.05f32..0.95));
    let as_f64: Vec<Vec<f64>> = (0..16)
        .map(|r| (0..16).map(|c| pixels[[r, c]] as f64).collect())
        .collect();
    (BScan::new(pixels, format!("r{seed}"), ScanKind::Clean).unwrap(), as_f64)
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0; // covers the infinity sentinels
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

// ---------------------------------------------------------------------------
// Criterion 1: metric oracle equivalence.
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_metric_oracle_equivalence() {
    let start = Instant::now();
    let tissue_rois = [(6usize, 2usize, 4usize, 4usize), (8, 9, 4, 4), (11, 5, 4, 4)];
    let background = (0usize, 0usize, 4usize, 16usize);
    let free = [(5usize, 1usize, 3usize, 3usize), (9, 2, 3, 3)];
    let shadowed = [(5usize, 10usize, 3usize, 3usize), (9, 11, 3, 3)];
    let tol = 1e-6;

    for seed in 0..50u64 {
        let (scan_a, img_a) = random_scan(seed);
        let (scan_b, img_b) = random_scan(seed + 1000);

        assert!(rel_err(metrics::agm(&scan_a), naive::agm(&img_a)) < tol, "agm seed {seed}");
        assert!(
            rel_err(
                metrics::psnr_paper(&scan_a, &scan_b).unwrap(),
                naive::psnr_paper(&img_a, &img_b)
            ) < tol,
            "psnr_paper seed {seed}"
        );
        assert!(
            rel_err(
                metrics::psnr_standard(&scan_a, &scan_b).unwrap(),
                naive::psnr_std(&img_a, &img_b)
            ) < tol,
            "psnr_std seed {seed}"
        );
        let rois: Vec<Roi> = tissue_rois
            .iter()
            .map(|&(r, c, h, w)| Roi::new(r, c, h, w, RoiLabel::Tissue))
            .collect();
        let bg = Roi::new(background.0, background.1, background.2, background.3, RoiLabel::Background);
        assert!(
            rel_err(
                metrics::cnr(&scan_a, &rois, &bg).unwrap(),
                naive::cnr(&img_a, &tissue_rois, background)
            ) < tol,
            "cnr seed {seed}"
        );
        assert!(
            rel_err(metrics::ssim(&scan_a, &scan_b).unwrap(), naive::ssim(&img_a, &img_b)) < tol,
            "ssim seed {seed}"
        );
        let free_rois: Vec<Roi> = free
            .iter()
            .map(|&(r, c, h, w)| Roi::new(r, c, h, w, RoiLabel::ShadowFree))
            .collect();
        let shadowed_rois: Vec<Roi> = shadowed
            .iter()
            .map(|&(r, c, h, w)| Roi::new(r, c, h, w, RoiLabel::Shadowed))
            .collect();
        assert!(
            rel_err(
                metrics::ilc(&scan_a, &free_rois, &shadowed_rois).unwrap(),
                naive::ilc(&img_a, &free, &shadowed)
            ) < tol,
            "ilc seed {seed}"
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "criterion 1 exceeded 10 s: {elapsed:.2} s");
    println!("criterion 1: PASS — 6 metrics match brute force on 50 images (rel 1e-6) in {elapsed:.2} s");
}

// ---------------------------------------------------------------------------
// Criterion 2: loss worked examples and gradient checks.
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_loss_correctness() {
    let start = Instant::now();

    // Worked example: content over a single 1x2x2 tap of ones vs zeros.
    let ones = vec![ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 2, 2]), 1.0f64)];
    let zeros = vec![ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 2, 2]), 0.0f64)];
    assert_eq!(content_loss(&ones, &zeros).unwrap(), 1.0);

    // Worked example: gram of [[1,2],[3,4]] is [[30]] and style against a
    // zero tap is 900.
    let feat = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0])
        .unwrap();
    assert_eq!(gram(&feat)[[0, 0]], 30.0);
    assert_eq!(style_loss(&[feat], &zeros).unwrap(), 900.0);

    // Worked example: 0.5 everywhere over 10x10 against 20 mask pixels.
    let pred = oct_restore::bscan::ShadowMask::new(Array2::from_elem((10, 10), 0.5), false).unwrap();
    let mut gt_values = Array2::zeros((10, 10));
    for i in 0..20 {
        gt_values[[i / 10, i % 10]] = 1.0;
    }
    let gt = oct_restore::bscan::ShadowMask::new(gt_values, true).unwrap();
    assert_eq!(shadow_loss(&pred, &gt).unwrap(), 2.5);

    // Analytic gradients of all three losses against central differences at
    // step 1e-4, through a 2-channel toy extractor on a 4x4 image.
    use oct_restore::autodiff::Tape;
    use oct_restore::losses::{tape_content_term, tape_shadow_term, tape_style_term};
    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    let image = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 4, 4]), |_| {
        rng.gen_range(0.1f64..0.9)
    });
    let reference = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 4, 4]), |_| {
        rng.gen_range(0.1f64..0.9)
    });
    let weight = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 1, 3, 3]), |_| {
        rng.gen_range(-0.5f64..0.5)
    });
    let bias = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[2]), |_| rng.gen_range(-0.1f64..0.1));

    for kind in ["content", "style", "shadow"] {
        let run = |img: &ndarray::ArrayD<f64>, with_grad: bool| {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(img.clone(), with_grad);
            let w = tape.constant(weight.clone());
            let b = tape.constant(bias.clone());
            let fd = tape.conv2d(x, w, b, 1);
            let xr = tape.constant(reference.clone());
            let fc = tape.conv2d(xr, w, b, 1);
            let loss = match kind {
                "content" => tape_content_term(&mut tape, fd, fc),
                "style" => tape_style_term(&mut tape, fd, fc),
                _ => {
                    let probs = tape.sigmoid(fd);
                    tape_shadow_term(&mut tape, probs, 5.0)
                }
            };
            let value = tape.scalar(loss);
            let grad = with_grad.then(|| tape.backward(loss).wrt(x).unwrap().clone());
            (value, grad)
        };
        let (_, grad) = run(&image, true);
        let analytic = grad.unwrap();
        let step = 1e-4;
        let mut max_rel = 0.0f64;
        for i in 0..image.len() {
            let mut plus = image.clone();
            let mut minus = image.clone();
            plus.as_slice_mut().unwrap()[i] += step;
            minus.as_slice_mut().unwrap()[i] -= step;
            let numeric = (run(&plus, false).0 - run(&minus, false).0) / (2.0 * step);
            let a = analytic.as_slice().unwrap()[i];
            max_rel = max_rel.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
        assert!(max_rel < 1e-3, "{kind} gradient relative error {max_rel}");
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "criterion 2 exceeded 30 s: {elapsed:.2} s");
    println!("criterion 2: PASS — worked examples exact, gradients within 1e-3 in {elapsed:.2} s");
}

// ---------------------------------------------------------------------------
// Criterion 3: weighted-total reproduction with the published weights.
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_total_loss_reproduction() {
    let weights = LossWeights::default();
    assert_eq!(weights.content, [2.86, 4.0, 6.67]);
    assert_eq!(weights.style, [6.67e-5, 1.8e-5, 2.1e-5]);

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut max_err = 0.0f64;
    for _ in 0..200 {
        let content: [f64; 3] = [rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0)];
        let style: [f64; 3] = [
            rng.gen_range(0.0..1e5),
            rng.gen_range(0.0..1e5),
            rng.gen_range(0.0..1e5),
        ];
        let shadow = rng.gen_range(0.0..3.0);
        let got = total_loss(&content, &style, shadow, &weights).unwrap();
        // Hand-summed, term by term in reverse order.
        let expected = shadow
            + (weights.style[2] * style[2]
                + (weights.content[2] * content[2]
                    + (weights.style[1] * style[1]
                        + (weights.content[1] * content[1]
                            + (weights.style[0] * style[0] + weights.content[0] * content[0])))));
        max_err = max_err.max((got - expected).abs());
    }
    assert!(max_err < 1e-9, "max absolute error {max_err}");
    println!("criterion 3: PASS — weighted total matches hand-summed values to 1e-9 (max err {max_err:.2e})");
}

// ---------------------------------------------------------------------------
// Criterion 4: phantom intra-layer-contrast ground truth.
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_phantom_ilc_ground_truth() {
    let start = Instant::now();
    for (a, expected) in [(0.3f32, 0.538), (0.5, 0.333), (0.7, 0.176)] {
        let vessel = Vessel { center: 32, half_width: 4, attenuation: a };
        let spec = PhantomSpec {
            height: 64,
            width: 64,
            layer_boundaries: vec![vec![20.0; 64], vec![40.0; 64]],
            layer_intensities: vec![0.05, 0.7, 0.5],
            texture_amplitude: 0.0,
            vessels: vec![vessel],
        };
        let pair = generate_phantom(&spec, 9).unwrap();
        let shadowed = apply_shadow(&pair.clean, &pair.mask, &spec.vessels, ShadowDepthMode::Constant)
            .unwrap();

        let region = layer_region(&spec, 1).unwrap();
        let shadow_cols: std::collections::HashSet<usize> = vessel.columns().collect();
        let free: Vec<(usize, usize)> = region
            .iter()
            .copied()
            .filter(|&(_, c)| !shadow_cols.contains(&c))
            .collect();
        let shadowed_px: Vec<(usize, usize)> = region
            .iter()
            .copied()
            .filter(|&(r, c)| pair.mask.values[[r, c]] == 1.0)
            .collect();
        let free_rois = metrics::sample_rois(&free, 5, 5, RoiLabel::ShadowFree, 1).unwrap();
        let shadowed_rois = metrics::sample_rois(&shadowed_px, 5, 5, RoiLabel::Shadowed, 2).unwrap();
        let measured = metrics::ilc(&shadowed, &free_rois, &shadowed_rois).unwrap();

        let closed_form = ((1.0 - a) / (1.0 + a)) as f64;
        assert!(
            (measured - closed_form).abs() < 1e-3,
            "attenuation {a}: measured {measured}, closed form {closed_form}"
        );
        assert!((measured - expected).abs() < 1e-3, "attenuation {a}: vs rounded target");
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "criterion 4 exceeded 10 s: {elapsed:.2} s");
    println!("criterion 4: PASS — ILC matches (1-a)/(1+a) within 1e-3 for a in {{0.3, 0.5, 0.7}} in {elapsed:.2} s");
}

// ---------------------------------------------------------------------------
// Criteria 5 and 6 share one desk-scale pipeline run.
// ---------------------------------------------------------------------------

struct DeskArtifacts {
    dice: f64,
    detector_secs: f64,
    processor_secs: f64,
    psnr_noisy: f64,
    psnr_processed: f64,
    ssim_noisy: f64,
    ssim_processed: f64,
    ilc_noisy: f64,
    ilc_processed: f64,
    shadow_noisy: f64,
    shadow_processed: f64,
    eval_count: usize,
    detector_frozen: bool,
    lr_schedule_ok: bool,
    detector_net: UNet<f32>,
    checkpoint_dir: std::path::PathBuf,
    _tmp: tempfile::TempDir,
}

fn desk_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::desk_scale(seed);
    cfg.detector = NetworkConfig { depth: 3, base_channels: 4 };
    cfg.processor = NetworkConfig { depth: 3, base_channels: 8 };
    cfg.train.batch_size = 6;
    cfg.train.workers = 2;
    cfg.train.learning_rate = 1e-3;
    cfg
}

fn desk_artifacts() -> &'static DeskArtifacts {
    static ARTIFACTS: OnceLock<DeskArtifacts> = OnceLock::new();
    ARTIFACTS.get_or_init(|| {
        let tmp = tempfile::tempdir().expect("tempdir");
        let data_dir = tmp.path().join("data");
        let eval_dir = tmp.path().join("eval_data");
        let cfg = desk_config(42);
        let dataset =
            generate_dataset(&data_dir, 200, 128, 128, 42, None, &cfg.noise).expect("train data");
        let evalset =
            generate_dataset(&eval_dir, 40, 128, 128, 4242, None, &cfg.noise).expect("eval data");

        // Phase one: detector, 30 epochs.
        let mut det_cfg = cfg.clone();
        det_cfg.train.max_epochs = 30;
        det_cfg.train.patience = 30;
        let t0 = Instant::now();
        let detector = train_detector(&dataset, &det_cfg, None).expect("detector training");
        let detector_secs = t0.elapsed().as_secs_f64();
        let dice = detector
            .epochs
            .iter()
            .filter_map(|e| e.val_dice)
            .fold(0.0f64, f64::max);
        let lr_schedule_ok = detector
            .epochs
            .iter()
            .all(|e| e.lr == det_cfg.train.learning_rate * 0.5f64.powi((e.epoch / 10) as i32));

        // Loss-weight calibration, then phase two: processor.
        let mut proc_cfg = cfg.clone();
        proc_cfg.calibration.stage_batches = 60;
        let (weights, _log) =
            calibrate_weights(&dataset, &detector.checkpoint, &proc_cfg).expect("calibration");
        proc_cfg.train.max_epochs = 12;
        proc_cfg.train.patience = 12;
        let before = hash_tensors::<f32>(detector.checkpoint.net.params.iter());
        let t1 = Instant::now();
        let processor = train_processor(&dataset, &detector.checkpoint, &weights, &proc_cfg, None)
            .expect("processor training");
        let processor_secs = t1.elapsed().as_secs_f64();
        let after = hash_tensors::<f32>(detector.checkpoint.net.params.iter());

        let report = evaluate(&evalset, &processor.checkpoint, Some(&detector.checkpoint), &cfg)
            .expect("evaluation");
        let mean = |variant: &str, metric: &str| -> f64 {
            report
                .mean_of(variant, metric)
                .unwrap_or_else(|| panic!("missing {variant}/{metric}"))
        };

        let checkpoint_dir = tmp.path().join("detector_ckpt");
        detector.checkpoint.save(&checkpoint_dir).expect("save detector");

        DeskArtifacts {
            dice,
            detector_secs,
            processor_secs,
            psnr_noisy: mean("noisy", "psnr_paper"),
            psnr_processed: mean("processed", "psnr_paper"),
            ssim_noisy: mean("noisy", "ssim"),
            ssim_processed: mean("processed", "ssim"),
            ilc_noisy: mean("noisy", "ilc"),
            ilc_processed: mean("processed", "ilc"),
            shadow_noisy: mean("noisy", "shadow_score"),
            shadow_processed: mean("processed", "shadow_score"),
            eval_count: evalset.len(),
            detector_frozen: before == after,
            lr_schedule_ok,
            detector_net: detector.checkpoint.net.clone(),
            checkpoint_dir,
            _tmp: tmp,
        }
    })
}

#[test]
fn criterion_5_detector_desk_training() {
    let art = desk_artifacts();
    let pass = art.dice >= 0.80;
    println!(
        "criterion 5: {} — validation Dice {:.3} (need >= 0.80) after <= 30 epochs on 200 phantoms in {:.0} s (target < 900 s)",
        if pass { "PASS" } else { "FAIL" },
        art.dice,
        art.detector_secs
    );
    assert!(pass, "validation Dice {:.3} below 0.80", art.dice);
}

#[test]
fn criterion_6_processor_desk_training() {
    let art = desk_artifacts();
    assert!(art.eval_count >= 30, "held-out set has {} < 30 images", art.eval_count);

    let psnr_gain = art.psnr_processed - art.psnr_noisy;
    let ssim_rel = (art.ssim_processed - art.ssim_noisy) / art.ssim_noisy;
    let ilc_ratio = art.ilc_processed / art.ilc_noisy;
    let shadow_ratio = art.shadow_processed / art.shadow_noisy;

    let pass_a = psnr_gain >= 1.0;
    let pass_b = ssim_rel >= 0.20;
    let pass_c = ilc_ratio <= 0.5;
    let pass_d = shadow_ratio <= 0.5;
    println!(
        "criterion 6a: {} — paper-PSNR {:+.2} dB (need >= +1.0; noisy {:.2}, processed {:.2})",
        if pass_a { "PASS" } else { "FAIL" },
        psnr_gain,
        art.psnr_noisy,
        art.psnr_processed
    );
    println!(
        "criterion 6b: {} — SSIM {:+.1}% relative (need >= +20%; noisy {:.3}, processed {:.3})",
        if pass_b { "PASS" } else { "FAIL" },
        100.0 * ssim_rel,
        art.ssim_noisy,
        art.ssim_processed
    );
    println!(
        "criterion 6c: {} — ILC ratio {:.3} (need <= 0.5; noisy {:.3}, processed {:.3})",
        if pass_c { "PASS" } else { "FAIL" },
        ilc_ratio,
        art.ilc_noisy,
        art.ilc_processed
    );
    println!(
        "criterion 6d: {} — shadow-score ratio {:.3} (need <= 0.5; noisy {:.3}, processed {:.3})",
        if pass_d { "PASS" } else { "FAIL" },
        shadow_ratio,
        art.shadow_noisy,
        art.shadow_processed
    );
    println!(
        "criterion 6: processor training took {:.0} s (target < 3600 s) on {} held-out phantoms",
        art.processor_secs, art.eval_count
    );
    assert!(pass_a, "paper-PSNR gain {psnr_gain:.2} dB below +1 dB");
    assert!(pass_b, "SSIM relative gain {:.1}% below 20%", 100.0 * ssim_rel);
    assert!(pass_c, "ILC ratio {ilc_ratio:.3} above 0.5");
    assert!(pass_d, "shadow-score ratio {shadow_ratio:.3} above 0.5");
}

// ---------------------------------------------------------------------------
// Criterion 7: end-to-end determinism.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_pipeline_determinism() {
    let run_pipeline = || -> (String, String) {
        let tmp = tempfile::tempdir().expect("tempdir");
        let mut cfg = desk_config(77);
        cfg.detector = NetworkConfig { depth: 2, base_channels: 2 };
        cfg.processor = NetworkConfig { depth: 2, base_channels: 2 };
        cfg.train.workers = 1;
        cfg.train.max_epochs = 2;
        let data = generate_dataset(&tmp.path().join("d"), 16, 64, 64, 77, None, &cfg.noise)
            .expect("data");
        let detector = train_detector(&data, &cfg, None).expect("detector");
        let processor =
            train_processor(&data, &detector.checkpoint, &LossWeights::default(), &cfg, None)
                .expect("processor");
        let report = evaluate(&data, &processor.checkpoint, Some(&detector.checkpoint), &cfg)
            .expect("evaluate");
        (report.to_csv(), report.summary_json())
    };
    let (csv_a, json_a) = run_pipeline();
    let (csv_b, json_b) = run_pipeline();
    assert_eq!(csv_a, csv_b, "metric CSVs differ between identical runs");
    assert_eq!(json_a, json_b, "summaries differ between identical runs");
    println!(
        "criterion 7: PASS — two generate->train->train->evaluate runs with equal seeds produced identical reports ({} rows)",
        csv_a.lines().count() - 1
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: module invariants spot-checked end to end.
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_invariant_suites() {
    use oct_restore::autodiff::Tape;
    use oct_restore::nets::{Extractor, FeatureExtractorSpec, WeightsSource};

    // Gram symmetry / PSD on random features.
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    for _ in 0..10 {
        let f = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[4, 5, 5]), |_| {
            rng.gen_range(-1.0..1.0)
        });
        let g = gram(&f);
        for a in 0..4 {
            for b in 0..4 {
                assert!((g[[a, b]] - g[[b, a]]).abs() < 1e-9, "gram not symmetric");
            }
        }
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut quad = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                quad += x[a] * g[[a, b]] * x[b];
            }
        }
        assert!(quad >= -1e-9, "gram not PSD");
    }

    // Noise moment envelope and seed independence.
    let params = oct_restore::noise::NoiseParams::default();
    let field = oct_restore::noise::sample_noise(256, 256, &params, 7);
    let n = field.len() as f64;
    let mean = field.iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (field.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.01 && (0.018..=0.55).contains(&std), "noise moments out of envelope");

    // Augmentation keeps image and mask aligned.
    let mut mask_values = Array2::zeros((32, 32));
    for r in 8..32 {
        for c in 12..18 {
            mask_values[[r, c]] = 1.0;
        }
    }
    let mask = oct_restore::bscan::ShadowMask::new(mask_values.clone(), true).unwrap();
    let support = BScan::new(mask_values, "support", ScanKind::Clean).unwrap();
    let pair = oct_restore::bscan::ImagePair::new(support.clone(), mask, None).unwrap();
    for seed in [1u64, 2, 3] {
        let out = oct_restore::noise::augment(&pair, &oct_restore::noise::AugmentParams::default(), seed);
        let rebinarized = out.clean.pixels.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        assert_eq!(out.mask.values, rebinarized, "augmented mask drifted from image support");
    }

    // Checkpoint round trip reproduces outputs bit-exactly on 10 probes.
    let art = desk_artifacts();
    let reloaded = oct_restore::checkpoint::Checkpoint::<f32>::load(&art.checkpoint_dir)
        .expect("reload checkpoint");
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = Array2::from_shape_fn((64, 64), |_| rng.gen_range(0.0f32..1.0));
        let a = art.detector_net.infer(&probe).unwrap();
        let b = reloaded.net.infer(&probe).unwrap();
        assert_eq!(a, b, "checkpoint round trip changed outputs (probe {seed})");
    }

    // Frozen extractors receive no gradient; the image does.
    let spec = FeatureExtractorSpec::by_name("resnext101_32x8d", WeightsSource::FrozenRandom, (32, 32))
        .unwrap();
    let ex = Extractor::<f64>::build(spec, 3, None).unwrap();
    let mut tape = Tape::<f64>::new();
    let image = tape.leaf(
        ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 32, 32]), |_| rng.gen_range(0.0..1.0)),
        true,
    );
    let taps = ex.extract(&mut tape, image);
    let mut loss = None;
    for t in taps {
        let sq = tape.mul(t, t);
        let s = tape.sum(sq);
        loss = Some(match loss {
            None => s,
            Some(acc) => tape.add(acc, s),
        });
    }
    let grads = tape.backward(loss.unwrap());
    assert!(grads.wrt(image).unwrap().iter().any(|&v| v != 0.0), "image gradient vanished");

    // Fully convolutional shape scaling (64 -> 128 doubles the output).
    let net = &art.detector_net;
    let out64 = net.infer(&Array2::from_elem((64, 64), 0.5f32)).unwrap();
    let out128 = net.infer(&Array2::from_elem((128, 128), 0.5f32)).unwrap();
    assert_eq!(out64.dim(), (64, 64));
    assert_eq!(out128.dim(), (128, 128));

    // Learning-rate schedule and frozen-detector guarantee from the shared run.
    assert!(art.lr_schedule_ok, "recorded learning rates deviate from base * 0.5^(epoch/10)");
    assert!(art.detector_frozen, "detector parameters changed during processor training");

    println!("criterion 8: PASS — invariant suite (gram, noise, augmentation, checkpoint, frozen extractors, shape scaling, lr schedule, frozen detector)");
}
