use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device, Tensor};
use clap::{Parser, Subcommand};
use sketchkp::checkpoint::Checkpoint;
use sketchkp::config::RunConfig;
use sketchkp::dataset::edgemap::{ensure_cached, load_rgb, CannyThresholds};
use sketchkp::dataset::images::{resize_square, to_tensor};
use sketchkp::dataset::synthetic::{generate, SyntheticSpec};
use sketchkp::dataset::{load_annotations, CacheStatus, DatasetIndex, Detector, ImageBank, Modality, Protocol};
use sketchkp::evaluator::{evaluate, render_overlay, render_table, EvalReport};
use sketchkp::trainer::train;
use sketchkp::Error;

const CACHE_ENV: &str = "SKETCHKP_CACHE";

#[derive(Parser)]
#[command(name = "sketchkp", version, about = "Few-shot keypoint detection with sketch supports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Populate the edgemap cache for every image in the dataset.
    MakeEdgemaps {
        #[arg(long)]
        config: PathBuf,
        /// canny, external_S, external_S1 or external_S2.
        #[arg(long, default_value = "canny")]
        detector: String,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        overrides: Vec<String>,
    },
    /// Train and print the checkpoint path.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Print a progress line every this many iterations (0 = quiet).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint under one protocol and emit the report JSON.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// seen_base, seen_novel, unseen_base or unseen_novel.
        #[arg(long)]
        protocol: String,
        #[arg(long)]
        out: Option<PathBuf>,
        overrides: Vec<String>,
    },
    /// Localize the support's keypoints in query photos.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotation file holding the K support records.
        #[arg(long)]
        support: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        queries: Vec<PathBuf>,
        #[arg(long)]
        overlay_dir: Option<PathBuf>,
        /// Include the decoded point of every grid scale.
        #[arg(long)]
        debug_scales: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render evaluation reports as one table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Write the synthetic polygon dataset and a matching tiny config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long, default_value_t = 384)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Exit status for a failure that should not be reported as exit code 1.
struct Exit(u8);

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path, overrides).with_context(|| format!("loading config {}", path.display()))?;
    if cfg.cache_dir.is_none() {
        cfg.cache_dir = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    }
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<DatasetIndex> {
    let Some(path) = &cfg.dataset else {
        bail!("config has no dataset path");
    };
    if !path.exists() {
        bail!("dataset index {} does not exist", path.display());
    }
    load_annotations(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn make_edgemaps(config: &Path, detector: &str, cache_dir: Option<PathBuf>, overrides: &[String]) -> Result<Option<Exit>> {
    let cfg = load_config(config, overrides)?;
    let detector = Detector::parse(detector).with_context(|| format!("unknown detector `{detector}`"))?;
    let cache = cache_dir
        .or(cfg.cache_dir.clone())
        .context("no cache directory: pass --cache-dir, set cache_dir, or export SKETCHKP_CACHE")?;
    let index = load_dataset(&cfg)?;
    let thresholds = CannyThresholds {
        low: cfg.canny_low,
        high: cfg.canny_high,
    };
    let (mut generated, mut skipped, mut missing) = (0, 0, Vec::new());
    for img in index.images.iter().filter(|i| i.modality == Modality::Photo) {
        match ensure_cached(&img.image_path, &img.stem(), detector, &cache, thresholds)? {
            CacheStatus::Generated => generated += 1,
            CacheStatus::Skipped => skipped += 1,
            CacheStatus::Missing => missing.push(sketchkp::dataset::edgemap_path(&cache, &img.stem(), detector)),
        }
    }
    println!("generated {generated} skipped {skipped} missing {}", missing.len());
    if !missing.is_empty() {
        eprintln!("missing precomputed edgemaps (run the external detector first):");
        for p in &missing {
            eprintln!("  {}", p.display());
        }
        return Ok(Some(Exit(2)));
    }
    Ok(None)
}

fn run_train(config: &Path, log_every: usize, overrides: &[String]) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let index = load_dataset(&cfg)?;
    let start = std::time::Instant::now();
    let outcome = train(&cfg, &index, |r| {
        if log_every > 0 && (r.iteration + 1) % log_every == 0 {
            eprintln!(
                "iter {:>6}  total {:.4}  kp {:.4}  kp_aux {:.4}  da {:.4}  style {:.4}  {:.0}s",
                r.iteration + 1,
                r.total,
                r.parts.kp,
                r.parts.kp_aux,
                r.parts.da,
                r.parts.style,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

fn run_eval(config: &Path, checkpoint: &Path, protocol: &str, out: Option<&Path>, overrides: &[String]) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let protocol = Protocol::parse(protocol).with_context(|| format!("unknown protocol `{protocol}`"))?;
    let ck = Checkpoint::load(checkpoint)?;
    check_compatible(&ck.config, &cfg)?;
    let model = ck.into_model(DType::F32)?;
    let index = load_dataset(&cfg)?;
    let bank = ImageBank::new(&cfg);
    let report = evaluate(&model, &ck.config, &index, &bank, protocol, &cfg)?;
    write_output(out, &report.to_json())?;
    eprint!("{}", report.to_table());
    Ok(())
}

/// The evaluation config must describe the network the checkpoint holds.
fn check_compatible(trained: &RunConfig, cfg: &RunConfig) -> Result<()> {
    if trained.encoder.backbone != cfg.encoder.backbone
        || trained.encoder.channels != cfg.encoder.channels
        || trained.image_size != cfg.image_size
        || trained.locator != cfg.locator
    {
        bail!(Error::Config(
            "checkpoint architecture (backbone, channels, image size, grid scales) differs from the config".into()
        ));
    }
    Ok(())
}

fn run_predict(
    checkpoint: &Path,
    support: &Path,
    queries: &[PathBuf],
    overlay_dir: Option<&Path>,
    debug_scales: bool,
    out: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = ck.config.clone();
    if cfg.cache_dir.is_none() {
        cfg.cache_dir = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    }
    let model = ck.into_model(DType::F32)?;
    let support_index = load_annotations(support).with_context(|| format!("loading support {}", support.display()))?;
    if support_index.images.is_empty() {
        bail!("support file {} has no records", support.display());
    }
    let bank = ImageBank::new(&cfg);
    let dtype = model.dtype();
    let support_modality = |m: Modality| match m {
        Modality::Photo if cfg.modality_mode != sketchkp::config::ModalityMode::PhotoSupport => Modality::EdgemapS,
        other => other,
    };
    let items: Vec<(usize, Modality)> = support_index
        .images
        .iter()
        .enumerate()
        .map(|(i, r)| (i, support_modality(r.modality)))
        .collect();
    let support_tensor = bank.batch(&support_index, &items, dtype)?;
    let support_points: Vec<Vec<([f64; 2], bool)>> = support_index.images.iter().map(|r| r.points()).collect();

    let size = cfg.image_size as u32;
    let mut rasters = Vec::new();
    let mut tensors = Vec::new();
    for q in queries {
        let img = load_rgb(q)?;
        tensors.push(to_tensor(&resize_square(&img, size), dtype, &Device::Cpu)?);
        rasters.push(img);
    }
    let query_tensor = Tensor::stack(&tensors, 0)?;
    let preds = model.predict(&support_tensor, &support_points, &query_tensor)?;

    let names = &support_index.keypoint_names;
    let mut results = Vec::new();
    for ((q, img), row) in queries.iter().zip(&rasters).zip(&preds) {
        let (w, h) = img.dimensions();
        let pixel = |u: [f64; 2]| sketchkp::dataset::to_pixel(u, w, h);
        let keypoints: Vec<serde_json::Value> = row
            .iter()
            .enumerate()
            .map(|(n, p)| match p {
                None => serde_json::json!({"name": names[n], "x": null, "y": null}),
                Some(p) => {
                    let [x, y] = pixel(p.point);
                    let mut v = serde_json::json!({"name": names[n], "x": x, "y": y});
                    if debug_scales {
                        let per: Vec<serde_json::Value> = cfg
                            .locator
                            .scales
                            .iter()
                            .zip(&p.per_scale)
                            .map(|(l, u)| {
                                let [x, y] = pixel(*u);
                                serde_json::json!({"scale": l, "x": x, "y": y})
                            })
                            .collect();
                        v["per_scale"] = serde_json::Value::Array(per);
                    }
                    v
                }
            })
            .collect();
        if let Some(dir) = overlay_dir {
            let stem = q.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let points: Vec<Option<[f64; 2]>> = row.iter().map(|p| p.as_ref().map(|p| pixel(p.point))).collect();
            render_overlay(img, &points, &[], &dir.join(format!("{stem}.overlay.png")))?;
        }
        results.push(serde_json::json!({"image": q, "width": w, "height": h, "keypoints": keypoints}));
    }
    let doc = serde_json::json!({ "predictions": results });
    write_output(out, &serde_json::to_string_pretty(&doc)?)
}

fn run_report(paths: &[PathBuf]) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(EvalReport::from_json(&text)?)
        })
        .collect::<Result<Vec<_>>>()?;
    print!("{}", render_table(&reports));
    Ok(())
}

fn run(cli: Cli) -> Result<Option<Exit>> {
    match cli.command {
        Command::MakeEdgemaps {
            config,
            detector,
            cache_dir,
            overrides,
        } => return make_edgemaps(&config, &detector, cache_dir, &overrides),
        Command::Train {
            config,
            log_every,
            overrides,
        } => run_train(&config, log_every, &overrides)?,
        Command::Eval {
            config,
            checkpoint,
            protocol,
            out,
            overrides,
        } => run_eval(&config, &checkpoint, &protocol, out.as_deref(), &overrides)?,
        Command::Predict {
            checkpoint,
            support,
            queries,
            overlay_dir,
            debug_scales,
            out,
        } => run_predict(&checkpoint, &support, &queries, overlay_dir.as_deref(), debug_scales, out.as_deref())?,
        Command::Report { reports } => run_report(&reports)?,
        Command::Synth {
            out,
            classes,
            per_class,
            size,
            seed,
        } => {
            let spec = SyntheticSpec {
                classes,
                per_class,
                size,
                seed,
            };
            let (layout, index) = generate(&out, &spec)?;
            println!("{} images, config {}", index.images.len(), layout.config.display());
        }
    }
    Ok(None)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(Exit(code))) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
