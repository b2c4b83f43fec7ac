//! Command-line entry point: phantom generation, two-phase training, weight
//! calibration, inference, evaluation, and report rendering.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use oct_restore::bscan::{load_image, save_image, BitDepth};
use oct_restore::checkpoint::Checkpoint;
use oct_restore::config::PipelineConfig;
use oct_restore::dataset::{generate_dataset, load_dataset};
use oct_restore::error::{Error, Result};
use oct_restore::losses::LossWeights;
use oct_restore::metrics::{normalize_report, MetricReport};
use oct_restore::nets::WeightsSource;
use oct_restore::pipeline::{
    calibrate_weights, evaluate, infer_scan, train_detector, train_processor,
};
use oct_restore::report::{comparison_grid, lpi_plot, save_gray8, save_grid};

#[derive(Parser)]
#[command(
    name = "oct-restore",
    about = "Joint speckle-noise and vessel-shadow removal for OCT B-scans",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Pipeline configuration file (TOML); flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel worker count override (1 = fully deterministic ordering).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Clone)]
struct TrainOpts {
    #[command(flatten)]
    common: CommonOpts,
    /// Maximum training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Base learning rate (halved every 10 epochs).
    #[arg(long)]
    lr: Option<f64>,
    /// UNet downsampling depth.
    #[arg(long)]
    depth: Option<usize>,
    /// Feature maps at the first level (doubling per level).
    #[arg(long)]
    base_channels: Option<usize>,
    /// Disable online augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with exact shadow masks.
    Generate {
        #[command(flatten)]
        common: CommonOpts,
        /// Output dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Scan size as HxW, e.g. 128x128.
        #[arg(long, default_value = "128x128")]
        size: String,
        /// Texture amplitude override in [0, 0.2].
        #[arg(long)]
        texture_amplitude: Option<f32>,
    },
    /// Train the shadow-detector network (phase one).
    TrainDetector {
        #[command(flatten)]
        train: TrainOpts,
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the image-processor network against a frozen detector (phase two).
    TrainProcessor {
        #[command(flatten)]
        train: TrainOpts,
        #[arg(long)]
        data: PathBuf,
        /// Detector checkpoint directory.
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Loss-weight file from calibrate-weights (JSON); defaults to the
        /// published weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Directory of exported pretrained extractor blobs.
        #[arg(long)]
        extractor_weights: Option<PathBuf>,
        /// Use seeded frozen-random extractors instead of pretrained ones.
        #[arg(long)]
        frozen_random: bool,
    },
    /// Derive loss weights with the two-stage balancing procedure.
    CalibrateWeights {
        #[command(flatten)]
        train: TrainOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        /// Output JSON file for the weights.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        extractor_weights: Option<PathBuf>,
        #[arg(long)]
        frozen_random: bool,
    },
    /// Restore one scan or a directory of scans.
    Infer {
        #[command(flatten)]
        common: CommonOpts,
        /// Input scan file or directory of scans.
        #[arg(long)]
        input: PathBuf,
        /// Processor checkpoint directory.
        #[arg(long)]
        processor: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute all metrics for noisy and processed renditions of a dataset.
    Evaluate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        processor: PathBuf,
        /// Detector checkpoint for shadow scores (optional).
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize metric CSVs; optionally normalize against a multi-frame
    /// report and render comparison grids and profile plots.
    Report {
        #[command(flatten)]
        common: CommonOpts,
        /// Metrics CSV produced by evaluate.
        #[arg(long)]
        metrics: PathBuf,
        /// Multi-frame metrics CSV to normalize against.
        #[arg(long)]
        multiframe: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Render grids/plots for this many dataset records.
        #[arg(long, default_value_t = 0)]
        render_count: usize,
        /// Dataset root for rendering.
        #[arg(long)]
        render_data: Option<PathBuf>,
        /// Processor checkpoint for rendering.
        #[arg(long)]
        processor: Option<PathBuf>,
    },
}

fn load_config(common: &CommonOpts) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.global_seed = seed;
    }
    if let Some(workers) = common.workers {
        cfg.train.workers = workers;
    }
    Ok(cfg)
}

fn apply_train_opts(cfg: &mut PipelineConfig, opts: &TrainOpts, processor: bool) {
    if let Some(epochs) = opts.epochs {
        cfg.train.max_epochs = epochs;
    }
    if let Some(batch) = opts.batch_size {
        cfg.train.batch_size = batch;
    }
    if let Some(lr) = opts.lr {
        cfg.train.learning_rate = lr;
    }
    let net = if processor { &mut cfg.processor } else { &mut cfg.detector };
    if let Some(depth) = opts.depth {
        net.depth = depth;
    }
    if let Some(base) = opts.base_channels {
        net.base_channels = base;
    }
    if opts.no_augment {
        cfg.augment.enabled = false;
    }
}

fn out_dir(requested: Option<PathBuf>, default_name: &str) -> PathBuf {
    requested.unwrap_or_else(|| PipelineConfig::default_output_root().join(default_name))
}

fn parse_size(size: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = size.split('x').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!("size must look like 128x128, got {size}")));
    }
    let h = parts[0]
        .parse()
        .map_err(|_| Error::Config(format!("bad height in {size}")))?;
    let w = parts[1]
        .parse()
        .map_err(|_| Error::Config(format!("bad width in {size}")))?;
    Ok((h, w))
}

fn load_weights(path: Option<&Path>) -> Result<LossWeights> {
    match path {
        None => Ok(LossWeights::default()),
        Some(path) => {
            let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let weights: LossWeights = serde_json::from_str(&json)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            weights.validate()?;
            Ok(weights)
        }
    }
}

fn set_extractor_source(
    cfg: &mut PipelineConfig,
    frozen_random: bool,
    extractor_weights: Option<PathBuf>,
) {
    if frozen_random {
        cfg.extractors.weights_source = WeightsSource::FrozenRandom;
    }
    if extractor_weights.is_some() {
        cfg.extractors.weights_dir = extractor_weights;
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out, count, size, texture_amplitude } => {
            let cfg = load_config(&common)?;
            let (h, w) = parse_size(&size)?;
            let out = out_dir(out, "dataset");
            let ds = generate_dataset(
                &out,
                count,
                h,
                w,
                cfg.train.global_seed,
                texture_amplitude.or(Some(cfg.phantom.texture_amplitude)),
                &cfg.noise,
            )?;
            println!("generated {} phantoms ({h}x{w}) into {}", ds.len(), out.display());
        }
        Command::TrainDetector { train, data, out } => {
            let mut cfg = load_config(&train.common)?;
            apply_train_opts(&mut cfg, &train, false);
            let dataset = load_dataset(&data)?;
            let out = out_dir(out, "detector");
            let outcome = train_detector(&dataset, &cfg, Some(&out))?;
            outcome.checkpoint.save(&out)?;
            let last = outcome.epochs.last().expect("epochs");
            println!(
                "detector: best epoch {} (val loss {:.5}, val dice {:.4}); checkpoint in {}",
                outcome.best_epoch,
                last.val_loss,
                last.val_dice.unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::TrainProcessor {
            train,
            data,
            detector,
            out,
            weights,
            extractor_weights,
            frozen_random,
        } => {
            let mut cfg = load_config(&train.common)?;
            apply_train_opts(&mut cfg, &train, true);
            set_extractor_source(&mut cfg, frozen_random, extractor_weights);
            let dataset = load_dataset(&data)?;
            let detector = Checkpoint::<f32>::load(&detector)?;
            let weights = load_weights(weights.as_deref())?;
            let out = out_dir(out, "processor");
            let outcome = train_processor(&dataset, &detector, &weights, &cfg, Some(&out))?;
            outcome.checkpoint.save(&out)?;
            println!(
                "processor: best epoch {} (val loss {:.5}); checkpoint in {}",
                outcome.best_epoch,
                outcome.epochs.last().expect("epochs").val_loss,
                out.display()
            );
        }
        Command::CalibrateWeights {
            train,
            data,
            detector,
            out,
            extractor_weights,
            frozen_random,
        } => {
            let mut cfg = load_config(&train.common)?;
            apply_train_opts(&mut cfg, &train, true);
            set_extractor_source(&mut cfg, frozen_random, extractor_weights);
            let dataset = load_dataset(&data)?;
            let detector = Checkpoint::<f32>::load(&detector)?;
            let (weights, log) = calibrate_weights(&dataset, &detector, &cfg)?;
            let out = out_dir(out, "weights.json");
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let payload = serde_json::json!({
                "content": weights.content,
                "style": weights.style,
                "log": log,
            });
            // The weights file itself stays loadable as plain LossWeights.
            std::fs::write(&out, serde_json::to_string_pretty(&weights).expect("weights encode"))
                .map_err(|e| Error::io(&out, e))?;
            let log_path = out.with_extension("log.json");
            std::fs::write(&log_path, serde_json::to_string_pretty(&payload).expect("log encode"))
                .map_err(|e| Error::io(&log_path, e))?;
            println!(
                "calibrated weights w = {:?}, k = {:?}; written to {}",
                weights.content,
                weights.style,
                out.display()
            );
        }
        Command::Infer { common, input, processor, out } => {
            let _cfg = load_config(&common)?;
            let processor = Checkpoint::<f32>::load(&processor)?;
            let out = out_dir(out, "restored");
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let inputs: Vec<PathBuf> = if input.is_dir() {
                let mut files: Vec<PathBuf> = std::fs::read_dir(&input)
                    .map_err(|e| Error::io(&input, e))?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| {
                        p.extension()
                            .map(|x| x == "png" || x == "tiff" || x == "tif")
                            .unwrap_or(false)
                    })
                    .collect();
                files.sort();
                files
            } else {
                vec![input.clone()]
            };
            if inputs.is_empty() {
                return Err(Error::Data(format!("no scans found under {}", input.display())));
            }
            let mut total = 0.0;
            for path in &inputs {
                let scan = load_image(path)?;
                let (restored, secs) = infer_scan(&scan, &processor)?;
                total += secs;
                let target = out.join(format!("{}.png", restored.id));
                save_image(&restored, &target, BitDepth::Sixteen)?;
            }
            println!(
                "restored {} scan(s) into {} (mean {:.1} ms/scan)",
                inputs.len(),
                out.display(),
                1e3 * total / inputs.len() as f64
            );
        }
        Command::Evaluate { common, data, processor, detector, out } => {
            let cfg = load_config(&common)?;
            let dataset = load_dataset(&data)?;
            let processor = Checkpoint::<f32>::load(&processor)?;
            let detector = match detector {
                Some(dir) => Some(Checkpoint::<f32>::load(&dir)?),
                None => None,
            };
            let started = std::time::Instant::now();
            let report = evaluate(&dataset, &processor, detector.as_ref(), &cfg)?;
            let per_image_ms = 1e3 * started.elapsed().as_secs_f64() / dataset.len().max(1) as f64;
            let out = out_dir(out, "evaluation");
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let csv_path = out.join("metrics.csv");
            std::fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
            let json_path = out.join("summary.json");
            std::fs::write(&json_path, report.summary_json()).map_err(|e| Error::io(&json_path, e))?;
            for key in ["psnr_paper", "ssim", "ilc"] {
                let noisy = report.mean_of("noisy", key);
                let processed = report.mean_of("processed", key);
                if let (Some(a), Some(b)) = (noisy, processed) {
                    println!("{key}: noisy {a:.4} -> processed {b:.4}");
                }
            }
            println!(
                "evaluated {} images ({per_image_ms:.1} ms/image incl. metrics); wrote {} and {}",
                dataset.len(),
                csv_path.display(),
                json_path.display()
            );
        }
        Command::Report {
            common,
            metrics,
            multiframe,
            out,
            render_count,
            render_data,
            processor,
        } => {
            let cfg = load_config(&common)?;
            let text = std::fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
            let report = MetricReport::from_csv(&text)?;
            let out = out_dir(out, "report");
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let summary_path = out.join("summary.json");
            std::fs::write(&summary_path, report.summary_json())
                .map_err(|e| Error::io(&summary_path, e))?;
            if let Some(mf_path) = multiframe {
                let mf_text = std::fs::read_to_string(&mf_path).map_err(|e| Error::io(&mf_path, e))?;
                let mf = MetricReport::from_csv(&mf_text)?;
                let normalized = normalize_report(&report, &mf)?;
                let norm_path = out.join("normalized.csv");
                std::fs::write(&norm_path, normalized.to_csv()).map_err(|e| Error::io(&norm_path, e))?;
                println!("wrote {}", norm_path.display());
            }
            if render_count > 0 {
                let data = render_data.ok_or_else(|| {
                    Error::Config("--render-data is required when --render-count > 0".into())
                })?;
                let ckpt_dir = processor.ok_or_else(|| {
                    Error::Config("--processor is required when --render-count > 0".into())
                })?;
                let dataset = load_dataset(&data)?;
                let ckpt = Checkpoint::<f32>::load(&ckpt_dir)?;
                render_samples(&dataset, &ckpt, &cfg, render_count, &out)?;
            }
            println!("wrote {}", summary_path.display());
        }
    }
    Ok(())
}

fn render_samples(
    dataset: &oct_restore::dataset::Dataset,
    processor: &Checkpoint<f32>,
    cfg: &PipelineConfig,
    count: usize,
    out: &Path,
) -> Result<()> {
    use oct_restore::noise::{add_noise, derive_seed, sample_noise};
    for record in dataset.records.iter().take(count) {
        let clean = &record.pair.clean;
        let (h, w) = clean.pixels.dim();
        let noisy = match &record.pair.noisy {
            Some(n) => n.clone(),
            None => {
                let shadowed = record.shadowed_base()?;
                let field = sample_noise(
                    h,
                    w,
                    &cfg.noise,
                    derive_seed(cfg.train.global_seed, record.id(), u64::MAX),
                );
                add_noise(&shadowed, &field)?
            }
        };
        let (processed, _) = infer_scan(&noisy, processor)?;
        let grid = comparison_grid(&noisy, &processed, clean)?;
        save_grid(&grid, &out.join(format!("{}_grid.png", record.id())))?;

        if let Some(spec) = &record.spec {
            if spec.layer_boundaries.len() >= 2 {
                let layer = 1usize;
                let path: Vec<usize> = (0..spec.width)
                    .map(|c| {
                        let top = spec.layer_boundaries[layer - 1][c];
                        let bottom = spec.layer_boundaries[layer][c];
                        ((top + bottom) / 2.0).round() as usize
                    })
                    .collect();
                let mut profiles = Vec::new();
                for (name, img) in [("noisy", &noisy), ("processed", &processed), ("clean", clean)] {
                    if let Ok(profile) = oct_restore::metrics::lpi_profile(img, &path, 1) {
                        profiles.push((name.to_string(), profile.values));
                    }
                }
                if !profiles.is_empty() {
                    let canvas = lpi_plot(&profiles, 160)?;
                    save_gray8(&canvas, &out.join(format!("{}_lpi.png", record.id())))?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
