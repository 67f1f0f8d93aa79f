//! `sdcs`: train, encode, decode, evaluate and self-check scalable CS models.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or contract
//! violations (bad flags, ratios above the model maximum, `R_R > R_S`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sdcs::cs::default_validation_ratios;
use sdcs::data::{extract_patches, list_pgm_files, load_pgm, read_manifest, save_pgm, split_sources, PgmMode, Split};
use sdcs::metrics::{metric_conventions, sweep};
use sdcs::train::{train, write_log_csv};
use sdcs::{BackwardFault, BlockGeometry, Checkpoint, GrayImage, MeasurementFile, ModelSpec, Ratio, Strategy, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "sdcs", version, about = "Scalable deep compressive sensing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write the best checkpoint, log and config.
    Train(TrainArgs),
    /// Sample an image at R_S into a measurement file.
    Encode(EncodeArgs),
    /// Reconstruct an image from a measurement file at R_R <= R_S.
    Decode(DecodeArgs),
    /// Sweep a checkpoint over CS ratios and write PSNR/SSIM tables.
    Eval(EvalArgs),
    /// Run the built-in gradient and consistency checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum StrategyArg {
    Scalable,
    Fixed,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FamilyArg {
    Unfolded,
    Mlp,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of PGM images or a manifest listing them.
    #[arg(long)]
    data: PathBuf,
    /// Validation images (directory or manifest). Without it, `--val-count`
    /// images are held out of `--data`.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    val_count: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = StrategyArg::Scalable)]
    strategy: StrategyArg,
    /// Training ratio of the fixed strategy.
    #[arg(long)]
    ratio: Option<Ratio>,
    /// Maximum CS ratio R_M.
    #[arg(long, default_value = "0.5")]
    rm: Ratio,
    /// Block size as `S` or `HxW`.
    #[arg(long, default_value = "33", value_parser = parse_geometry)]
    block: BlockGeometry,
    #[arg(long, value_enum, default_value_t = FamilyArg::Unfolded)]
    family: FamilyArg,
    /// Unfolded phases K.
    #[arg(long, default_value_t = sdcs::models::DEFAULT_PHASES)]
    phases: usize,
    /// Hidden MLP widths (default 4N).
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = sdcs::train::DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = sdcs::optim::DEFAULT_LR)]
    lr: f64,
    /// Training patches drawn from the training images.
    #[arg(long, default_value_t = 2000)]
    patches: usize,
    /// Validation ratios (default: RVG up to R_M).
    #[arg(long, value_delimiter = ',')]
    rvg: Option<Vec<Ratio>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PGM image to sample.
    #[arg(long)]
    input: PathBuf,
    /// Sampling ratio R_S.
    #[arg(long)]
    rs: Ratio,
    /// Measurement file to write.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Measurement file to read.
    #[arg(long)]
    input: PathBuf,
    /// Reconstruction ratio R_R (default: the file's R_S).
    #[arg(long)]
    rr: Option<Ratio>,
    /// PGM image to write.
    #[arg(long)]
    output: PathBuf,
    /// Write ASCII (P2) instead of binary (P5).
    #[arg(long)]
    plain: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of PGM images or a manifest listing them.
    #[arg(long)]
    images: PathBuf,
    /// Ratios to sweep.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<Ratio>>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupts one backward rule to demonstrate that the checks catch it.
    #[arg(long, hide = true)]
    inject_fault: Option<BackwardFault>,
}

/// A violated precondition that maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn parse_geometry(s: &str) -> std::result::Result<BlockGeometry, String> {
    let dim = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("invalid block size '{s}': {e}"));
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (dim(h)?, dim(w)?),
        None => (dim(s)?, dim(s)?),
    };
    BlockGeometry::new(h, w).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Selfcheck(a) => cmd_selfcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| {
                c.downcast_ref::<Usage>().is_some() || c.downcast_ref::<sdcs::Error>().is_some_and(|e| e.is_contract())
            });
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn image_paths(path: &Path) -> Result<Vec<PathBuf>> {
    let paths = if path.is_dir() {
        list_pgm_files(path)?
    } else {
        read_manifest(path)?
    };
    if paths.is_empty() {
        bail!(Usage(format!("no PGM images found in {}", path.display())));
    }
    Ok(paths)
}

fn load_images(paths: &[PathBuf]) -> Result<Vec<GrayImage>> {
    paths
        .iter()
        .map(|p| load_pgm(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn write_config(path: &Path, config: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(config)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `out/config.json` for directory outputs, `<file>.config.json` otherwise.
fn config_beside(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    output.with_file_name(name)
}

fn ratios_json(rs: &[Ratio]) -> Vec<f64> {
    rs.iter().map(|r| r.value()).collect()
}

fn paths_json(ps: &[PathBuf]) -> Vec<String> {
    ps.iter().map(|p| p.display().to_string()).collect()
}

#[derive(Serialize)]
struct TrainRecord {
    command: &'static str,
    train_images: Vec<String>,
    val_images: Vec<String>,
    out: String,
    strategy: String,
    max_ratio: f64,
    block_height: usize,
    block_width: usize,
    family: &'static str,
    phases: Option<usize>,
    hidden: Option<Vec<usize>>,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    patches: usize,
    ratio_grid: Vec<f64>,
    rvg: Vec<f64>,
    seed: u64,
    checkpoint: String,
    log: String,
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let n = a.block.n();
    let spec = match a.family {
        FamilyArg::Unfolded => ModelSpec::Unfolded { phases: a.phases },
        FamilyArg::Mlp => match &a.hidden {
            Some(h) => ModelSpec::Mlp { hidden: h.clone() },
            None => ModelSpec::default_mlp(n),
        },
    };
    let strategy = match (a.strategy, a.ratio) {
        (StrategyArg::Scalable, None) => Strategy::Scalable,
        (StrategyArg::Scalable, Some(_)) => bail!(Usage("--ratio only applies to --strategy fixed".into())),
        (StrategyArg::Fixed, Some(r)) => Strategy::Fixed(r),
        (StrategyArg::Fixed, None) => bail!(Usage("--strategy fixed requires --ratio".into())),
    };
    let mut config = TrainConfig::new(a.block, spec.clone(), a.rm);
    config.strategy = strategy;
    config.epochs = a.epochs;
    config.batch_size = a.batch_size;
    config.lr = a.lr;
    config.seed = a.seed;
    if let Some(rvg) = &a.rvg {
        config.rvg = rvg.clone();
    }
    config.validate()?;

    let sources = image_paths(&a.data)?;
    let (train_paths, val_paths) = match &a.val {
        Some(v) => (sources, image_paths(v)?),
        None => {
            let split = split_sources(sources, a.seed, a.val_count, 0).map_err(|e| Usage(e.to_string()))?;
            (split.train, split.val)
        }
    };
    let train_images = load_images(&train_paths)?;
    let val_images = load_images(&val_paths)?;
    let data = extract_patches(&train_images, a.block, a.patches, Split::Train, a.seed)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt_path = a.out.join("checkpoint.sdcs");
    let log_path = a.out.join("train_log.csv");
    let record = TrainRecord {
        command: "train",
        train_images: paths_json(&train_paths),
        val_images: paths_json(&val_paths),
        out: a.out.display().to_string(),
        strategy: strategy.to_string(),
        max_ratio: a.rm.value(),
        block_height: a.block.height,
        block_width: a.block.width,
        family: spec.family_name(),
        phases: matches!(spec, ModelSpec::Unfolded { .. }).then_some(a.phases),
        hidden: match &spec {
            ModelSpec::Mlp { hidden } => Some(hidden.clone()),
            ModelSpec::Unfolded { .. } => None,
        },
        epochs: config.epochs,
        batch_size: config.batch_size,
        lr: config.lr,
        patches: a.patches,
        ratio_grid: ratios_json(&config.ratio_grid),
        rvg: ratios_json(&config.rvg),
        seed: a.seed,
        checkpoint: ckpt_path.display().to_string(),
        log: log_path.display().to_string(),
    };
    write_config(&a.out.join("config.json"), &record)?;

    let start = Instant::now();
    let outcome = train(&config, &data, &val_images, |row| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  mean PSNR {:.3} dB  ({:.1}s)",
            row.epoch,
            row.loss,
            row.mean_psnr,
            start.elapsed().as_secs_f64()
        );
    })?;
    outcome.best.save(&ckpt_path)?;
    write_log_csv(&outcome.log, config.rvg.len(), &log_path)?;
    println!(
        "best epoch {} (mean RVG PSNR {:.3} dB) -> {}",
        outcome.best.epoch,
        outcome.best.best_mean_psnr,
        ckpt_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EncodeRecord {
    command: &'static str,
    checkpoint: String,
    input: String,
    output: String,
    rs: f64,
    prefix_len: usize,
    blocks: usize,
}

fn cmd_encode(a: EncodeArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let image = load_pgm(&a.input)?;
    let file = MeasurementFile::encode(&ck.model, &image.to_tensor(), a.rs)?;
    file.save(&a.output)?;
    write_config(
        &config_beside(&a.output),
        &EncodeRecord {
            command: "encode",
            checkpoint: a.checkpoint.display().to_string(),
            input: a.input.display().to_string(),
            output: a.output.display().to_string(),
            rs: a.rs.value(),
            prefix_len: file.prefix_len,
            blocks: file.records.len(),
        },
    )?;
    println!(
        "{} blocks x {} measurements -> {}",
        file.records.len(),
        file.prefix_len,
        a.output.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct DecodeRecord {
    command: &'static str,
    checkpoint: String,
    input: String,
    output: String,
    rs: f64,
    rr: f64,
    format: &'static str,
}

fn cmd_decode(a: DecodeArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let file = MeasurementFile::load(&a.input)?;
    let rr = a.rr.unwrap_or(file.sampled_ratio);
    let x = file.decode(&ck.model, rr)?;
    let mode = if a.plain { PgmMode::Plain } else { PgmMode::Raw };
    save_pgm(&GrayImage::from_tensor_clamped(&x)?, &a.output, mode)?;
    write_config(
        &config_beside(&a.output),
        &DecodeRecord {
            command: "decode",
            checkpoint: a.checkpoint.display().to_string(),
            input: a.input.display().to_string(),
            output: a.output.display().to_string(),
            rs: file.sampled_ratio.value(),
            rr: rr.value(),
            format: if a.plain { "P2" } else { "P5" },
        },
    )?;
    println!("decoded at {rr} -> {}", a.output.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalRecord {
    command: &'static str,
    checkpoint: String,
    images: Vec<String>,
    ratios: Vec<f64>,
    out: String,
    metrics: String,
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let paths = image_paths(&a.images)?;
    let images = load_images(&paths)?;
    let named: Vec<(String, GrayImage)> = paths
        .iter()
        .zip(images)
        .map(|(p, img)| (p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), img))
        .collect();
    let ratios = a.ratios.clone().unwrap_or_else(default_validation_ratios);
    let result = sweep(&ck.model, &named, &ratios)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    result.write_detail_csv(a.out.join("sweep_detail.csv"))?;
    result.write_summary_csv(a.out.join("sweep_summary.csv"))?;
    result.write_plot_data(a.out.join("sweep_plot.dat"))?;
    write_config(
        &a.out.join("config.json"),
        &EvalRecord {
            command: "eval",
            checkpoint: a.checkpoint.display().to_string(),
            images: paths_json(&paths),
            ratios: ratios_json(&result.ratios),
            out: a.out.display().to_string(),
            metrics: metric_conventions(),
        },
    )?;
    for s in &result.summary {
        println!("{:>6}  PSNR {:>8.3} dB  SSIM {:.4}", s.ratio, s.mean_psnr_db, s.mean_ssim);
    }
    for v in &result.trend_violations {
        eprintln!(
            "warning: mean PSNR drops {:.3} dB from {} to {}",
            v.drop_db, v.lower, v.higher
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_selfcheck(a: SelfcheckArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let outcomes = sdcs::selfcheck::run(a.seed, a.inject_fault);
    let mut failed = 0;
    for o in &outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {:<26} {} ({:.2}s)", o.name, o.detail, o.elapsed.as_secs_f64());
        failed += usize::from(!o.passed);
    }
    println!(
        "{} of {} properties passed in {:.2}s",
        outcomes.len() - failed,
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
