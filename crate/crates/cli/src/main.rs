//! Command-line front end for the distillation pipeline.
//!
//! Exit codes: 0 on success, 2 on usage errors (bad flags, unknown
//! subcommands), 1 on runtime failures with a single stderr line of the
//! form `error: <category>: <message>`.

mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use config::{resolve_config, resolve_spec, CliConfig};
use srdistill_core::data_prep::{ingest_corpus, load_dataset, prepare_corpus, save_dataset, DatasetMeta};
use srdistill_core::harness::{evolution_dump, run_grid};
use srdistill_core::latent_distill::{build_toy_generator, latent_distill, pretrain_generator, export_latent};
use srdistill_core::metrics::{eval_pairs_from_hr, evaluate_model, EvalOptions, MetricsReport};
use srdistill_core::models::{build_model, load_checkpoint, save_checkpoint, Architecture};
use srdistill_core::pixel_distill::{distill, export_synthetic, InitStrategy, ReferenceStrategy};
use srdistill_core::resize::DegradationConfig;
use srdistill_core::rng;
use srdistill_core::{Result, SrError};

const OUT_ROOT_ENV: &str = "SRDISTILL_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "srdistill",
    version,
    about = "Distills super-resolution training corpora into small synthetic datasets"
)]
struct Cli {
    /// TOML configuration file; --set overrides win over file values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Dotted-key override such as train.steps=500; repeatable. Applies
    /// to the spec file for report runs, to the tool config otherwise.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Root seed for every stochastic stage of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory receiving all artifacts; relative --out paths land
    /// under it. Precedence: this flag, then SRDISTILL_OUT_ROOT, then
    /// the config value.
    #[arg(long, global = true, value_name = "DIR")]
    out_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut a raw image directory into a grouped sub-image dataset.
    Prepare {
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Downscaling factor for the stored LR counterparts.
        #[arg(long, value_parser = parse_scale)]
        scale: Option<usize>,
        /// Square sub-image side length in pixels.
        #[arg(long)]
        size: Option<usize>,
        /// Step between neighboring sub-image origins.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Train a model on a prepared dataset and save a checkpoint.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, value_parser = ["srcnn", "vdsr", "edsr"])]
        arch: Option<String>,
        /// Upscaling factor; defaults to the dataset's stored scale.
        #[arg(long, value_parser = parse_scale)]
        scale: Option<usize>,
    },
    /// Evaluate a checkpoint on a directory of ground-truth images.
    Eval {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        testset: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Dataset name recorded in the report; defaults to the testset
        /// directory name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Distill a prepared dataset into a small synthetic set.
    #[command(subcommand)]
    Distill(DistillCommand),
    /// Run a full experiment grid from a declarative spec file.
    Report {
        #[arg(long, value_name = "FILE")]
        spec: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DistillCommand {
    /// Optimize synthetic images directly in pixel space.
    Pixel {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Synthetic images per pseudo-label.
        #[arg(long)]
        ipc: Option<usize>,
        #[arg(long, value_parser = ["noise", "downscale"])]
        init: Option<String>,
        #[arg(long, value_parser = ["random", "pretrained"])]
        reference: Option<String>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Optimize latent codes decoded through a toy generator.
    Latent {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Latent codes per pseudo-label.
        #[arg(long)]
        ipc: Option<usize>,
        #[arg(long, value_name = "N")]
        inversion_steps: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
}

fn parse_scale(s: &str) -> std::result::Result<usize, String> {
    match s {
        "2" => Ok(2),
        "4" => Ok(4),
        _ => Err(format!("scale must be 2 or 4, got {s}")),
    }
}

fn category(e: &SrError) -> &'static str {
    match e {
        SrError::Config(_) => "config",
        SrError::Ingest { .. } | SrError::EmptyCorpus(_) => "ingest",
        SrError::Shape(_) => "shape",
        SrError::Extraction(_) => "extraction",
        SrError::Sampling(_) => "sampling",
        SrError::Integrity(_) => "integrity",
        SrError::Data(_) => "data",
        SrError::Train { .. } => "train",
        SrError::Distill { .. } => "distill",
        SrError::Inversion(_) => "inversion",
        SrError::Metric(_) => "metric",
        SrError::Dump(_) => "dump",
        SrError::Report(_) => "report",
        SrError::Io(_) => "io",
        SrError::Image(_) => "image",
        SrError::Serde(_) => "serialization",
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let cat = category(&e);
        let mut msg = e.to_string().replace('\n', " ");
        if let Some(rest) = msg.strip_prefix(&format!("{cat}: ")) {
            msg = rest.to_string();
        }
        eprintln!("error: {cat}: {msg}");
        std::process::exit(1);
    }
}

fn out_root(cli: &Cli, cfg: &CliConfig) -> PathBuf {
    if let Some(root) = &cli.out_root {
        return root.clone();
    }
    if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
        if !root.is_empty() {
            return PathBuf::from(root);
        }
    }
    cfg.out_root.clone()
}

fn rooted(root: &Path, out: &Path) -> PathBuf {
    if out.is_absolute() {
        out.to_path_buf()
    } else {
        root.join(out)
    }
}

/// Writes the resolved configuration next to the run's outputs before
/// any work starts.
fn write_provenance<T: serde::Serialize>(dir: &Path, resolved: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(resolved)
        .map_err(|e| SrError::Config(format!("cannot serialize resolved config: {e}")))?;
    std::fs::write(dir.join("resolved_config.toml"), text)?;
    Ok(())
}

fn write_history_csv(path: &Path, column: &str, values: &[f64]) -> Result<()> {
    let mut text = format!("{column},loss\n");
    for (i, v) in values.iter().enumerate() {
        text.push_str(&format!("{},{v}\n", i + 1));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Report { spec, out } => {
            let mut resolved = resolve_spec(spec, &cli.overrides)?;
            if let Some(seed) = cli.seed {
                resolved.rng_seed = seed;
            }
            let cfg = CliConfig::default();
            let out_dir = rooted(&out_root(&cli, &cfg), out);
            write_provenance(&out_dir, &resolved)?;
            let report = run_grid(&resolved, &out_dir)?;
            for cell in &report.cells {
                match (&cell.metrics, &cell.error) {
                    (Some(m), _) => println!(
                        "cell {} {} x{} {}: psnr {:.2} dB ssim {:.4}",
                        cell.variant,
                        cell.architecture,
                        cell.scale,
                        cell.testset,
                        m.mean_psnr_db,
                        m.mean_ssim
                    ),
                    (None, Some(e)) => println!(
                        "cell {} {} x{} {}: failed ({e})",
                        cell.variant, cell.architecture, cell.scale, cell.testset
                    ),
                    (None, None) => {}
                }
            }
            println!("report written to {}", out_dir.display());
            Ok(())
        }
        other => {
            let mut cfg = resolve_config(cli.config.as_deref(), &cli.overrides)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let root = out_root(&cli, &cfg);
            run_tool(other, &cfg, &root)
        }
    }
}

fn run_tool(command: &Command, cfg: &CliConfig, root: &Path) -> Result<()> {
    match command {
        Command::Prepare { input, out, scale, size, stride } => {
            let mut cfg = cfg.clone();
            if let Some(s) = scale {
                cfg.prepare.scale = *s;
            }
            if let Some(s) = size {
                cfg.prepare.size = *s;
            }
            if let Some(s) = stride {
                cfg.prepare.stride = *s;
            }
            let out_dir = rooted(root, out);
            write_provenance(&out_dir, &cfg)?;
            let degradation = DegradationConfig::bicubic(cfg.prepare.scale);
            let groups = prepare_corpus(input, &degradation, cfg.prepare.size, cfg.prepare.stride)?;
            let corpus_name = input
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "corpus".into());
            let meta = DatasetMeta {
                corpus_name,
                scale: cfg.prepare.scale,
                sub_image_size: cfg.prepare.size,
                stride: cfg.prepare.stride,
            };
            let manifest_path = save_dataset(&groups, &meta, &out_dir)?;
            let subs: usize = groups.iter().map(|g| g.sub_images.len()).sum();
            println!(
                "prepared {} groups, {subs} sub-images, manifest {}",
                groups.len(),
                manifest_path.display()
            );
            Ok(())
        }
        Command::Train { data, out, arch, scale } => {
            let (manifest, groups) = load_dataset(data)?;
            let architecture = match arch.as_deref() {
                Some("vdsr") => Architecture::Vdsr,
                Some("edsr") => Architecture::Edsr,
                _ => Architecture::Srcnn,
            };
            let scale = scale.unwrap_or(manifest.scale);
            let out_file = rooted(root, out);
            let out_dir = out_file.parent().unwrap_or(Path::new(".")).to_path_buf();
            let mut cfg = cfg.clone();
            cfg.train.rng_seed = cfg.seed;
            write_provenance(&out_dir, &cfg)?;
            let model = build_model(
                architecture,
                scale,
                &cfg.arch,
                rng::derive_seed(cfg.seed, &[0x6d6f_6465]),
            )?;
            let (model, history) =
                srdistill_core::models::train(model, &groups, &DegradationConfig::bicubic(scale), &cfg.train)?;
            save_checkpoint(&model, &out_file)?;
            write_history_csv(&out_dir.join("train_history.csv"), "step", &history)?;
            println!(
                "trained {} x{scale} for {} steps, final loss {:.6}, checkpoint {}",
                architecture.name(),
                history.len(),
                history.last().copied().unwrap_or(f64::NAN),
                out_file.display()
            );
            Ok(())
        }
        Command::Eval { model, testset, out, name } => {
            let out_dir = rooted(root, out);
            write_provenance(&out_dir, cfg)?;
            let model = load_checkpoint(model)?;
            let corpus = ingest_corpus(testset)?;
            let pairs = eval_pairs_from_hr(&corpus, &DegradationConfig::bicubic(model.scale))?;
            let dataset = name.clone().unwrap_or_else(|| {
                testset
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "testset".into())
            });
            let report = evaluate_model(
                &model,
                &dataset,
                &pairs,
                &EvalOptions { border_crop: cfg.eval.border_crop },
                None,
            )?;
            write_eval_outputs(&out_dir, &report)?;
            println!(
                "evaluated {} images ({} failures): psnr {:.2} dB ssim {:.4}, results {}",
                report.per_image.len(),
                report.failures.len(),
                report.mean_psnr_db,
                report.mean_ssim,
                out_dir.display()
            );
            Ok(())
        }
        Command::Distill(DistillCommand::Pixel { data, out, ipc, init, reference, iters }) => {
            let (manifest, groups) = load_dataset(data)?;
            let mut cfg = cfg.clone();
            if let Some(n) = ipc {
                cfg.distill.ipc = *n;
            }
            if let Some(n) = iters {
                cfg.distill.iterations = *n;
            }
            match init.as_deref() {
                Some("noise") => cfg.distill.init = InitStrategy::Noise,
                Some("downscale") => cfg.distill.init = InitStrategy::Downscale,
                _ => {}
            }
            match reference.as_deref() {
                Some("random") => cfg.distill.reference = ReferenceStrategy::RandomInit,
                Some("pretrained") => cfg.distill.reference = ReferenceStrategy::Pretrained,
                _ => {}
            }
            cfg.distill.rng_seed = cfg.seed;
            let out_dir = rooted(root, out);
            write_provenance(&out_dir, &cfg)?;
            let arch_cfg = cfg.arch.clone();
            let arch = cfg.distill_architecture;
            let scale = manifest.scale;
            let factory = move |s: u64| build_model(arch, scale, &arch_cfg, s);
            let (set, history) = distill(&groups, scale, &cfg.distill, &factory)?;
            let manifest_path = export_synthetic(&set, &manifest.corpus_name, &out_dir)?;
            write_history_csv(&out_dir.join("history.csv"), "iteration", &history.losses)?;
            if cfg.distill.snapshot_every > 0 && !history.snapshots.is_empty() {
                evolution_dump(&history, cfg.distill.snapshot_every, &out_dir)?;
            }
            println!(
                "distilled {} labels x{} ipc in {} iterations, final loss {:.4}, manifest {}",
                set.images.len(),
                cfg.distill.ipc,
                history.losses.len(),
                history.losses.last().copied().unwrap_or(f64::NAN),
                manifest_path.display()
            );
            Ok(())
        }
        Command::Distill(DistillCommand::Latent { data, out, ipc, inversion_steps, iters }) => {
            let (manifest, groups) = load_dataset(data)?;
            let mut cfg = cfg.clone();
            if let Some(n) = ipc {
                cfg.latent.ipc = *n;
            }
            if let Some(n) = inversion_steps {
                cfg.latent.inversion_steps = *n;
            }
            if let Some(n) = iters {
                cfg.latent.iterations = *n;
            }
            cfg.latent.rng_seed = cfg.seed;
            let out_dir = rooted(root, out);
            write_provenance(&out_dir, &cfg)?;
            let mut generator = build_toy_generator(
                cfg.generator.latent_dim,
                cfg.generator.out_size,
                rng::derive_seed(cfg.seed, &[0x6765_6e65]),
            )?;
            if cfg.pretrain.steps > 0 {
                let mut pre = cfg.pretrain.clone();
                pre.rng_seed = cfg.seed;
                pretrain_generator(&mut generator, &groups, &pre)?;
            }
            let arch_cfg = cfg.arch.clone();
            let arch = cfg.distill_architecture;
            let scale = manifest.scale;
            let factory = move |s: u64| build_model(arch, scale, &arch_cfg, s);
            let (set, history) = latent_distill(&groups, scale, &cfg.latent, &generator, &factory)?;
            let manifest_path = export_latent(&set, &manifest.corpus_name, scale, &out_dir)?;
            write_history_csv(&out_dir.join("history.csv"), "iteration", &history.losses)?;
            println!(
                "distilled {} labels x{} codes in {} iterations, final loss {:.4}, manifest {}",
                set.codes.len(),
                cfg.latent.ipc,
                history.losses.len(),
                history.losses.last().copied().unwrap_or(f64::NAN),
                manifest_path.display()
            );
            Ok(())
        }
        Command::Report { .. } => unreachable!("handled before tool-config resolution"),
    }
}

fn write_eval_outputs(out_dir: &Path, report: &MetricsReport) -> Result<()> {
    let fmt_opt = |v: Option<f64>| v.map(|p| format!("{p:.6}")).unwrap_or_default();
    let mut csv = String::from("name,psnr_db,ssim,perceptual\n");
    for m in &report.per_image {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            m.name,
            m.psnr_db,
            m.ssim,
            fmt_opt(m.perceptual)
        ));
    }
    csv.push_str(&format!(
        "mean,{:.6},{:.6},{}\n",
        report.mean_psnr_db,
        report.mean_ssim,
        fmt_opt(report.mean_perceptual)
    ));
    std::fs::write(out_dir.join("eval.csv"), csv)?;

    let mut text = String::new();
    text.push_str(&format!("dataset: {}\n", report.dataset));
    text.push_str(&format!("model: {}\n", report.model));
    text.push_str(&format!(
        "images: {}\nfailures: {}\n",
        report.per_image.len(),
        report.failures.len()
    ));
    text.push_str(&format!("mean_psnr_db: {:.6}\n", report.mean_psnr_db));
    text.push_str(&format!("mean_ssim: {:.6}\n", report.mean_ssim));
    if let Some(p) = report.mean_perceptual {
        text.push_str(&format!("mean_perceptual: {p:.6}\n"));
    }
    for m in &report.per_image {
        text.push_str(&format!(
            "image {}: psnr_db {:.6} ssim {:.6}\n",
            m.name, m.psnr_db, m.ssim
        ));
    }
    for f in &report.failures {
        text.push_str(&format!("failure {}: {}\n", f.name, f.reason));
    }
    std::fs::write(out_dir.join("eval.txt"), text)?;
    Ok(())
}
