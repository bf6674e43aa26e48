//! Command-line entry point for the whole pipeline: dataset generation,
//! both training stages, evaluation, inference, gradient checking, and the
//! ablation harnesses.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Option
//! precedence is flags > config file > built-in defaults. `HFD_THREADS`
//! caps worker parallelism (0 = sequential).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use hfd_core::gradcheck;
use hfd_core::metrics::{write_eval_csv, MetricSummary};
use hfd_core::model::{Block, ModelConfig};
use hfd_core::synthdata::{
    generate_dataset, load_manifest, read_pgm, write_index_pgm, write_manifest, GenConfig,
};
use hfd_core::trainer::{
    ablate, checkpoint, evaluate_model, predict_mask, train_student, train_teacher, AblateConfig,
    InputKind, Precision, Suite, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "hfd",
    version,
    about = "Teacher-student feature distillation for SAR segmentation on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired EO/SAR dataset with masks and a manifest
    Generate(GenerateArgs),
    /// Stage one: train the EO teacher with the basic segmentation loss
    TrainTeacher(TrainArgs),
    /// Stage two: train the SAR student, optionally distilling from a teacher
    TrainStudent(TrainArgs),
    /// Evaluate a checkpoint on a manifest and write the metrics CSV
    Eval(EvalArgs),
    /// Predict class masks for SAR images
    Infer(InferArgs),
    /// Run the finite-difference gradient suite
    Gradcheck,
    /// Run an ablation suite: components | blocks | temperature
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Teacher checkpoint (train-student only; omit for a no-teacher baseline)
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// key=value config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    focal_variant: Option<String>,
    #[arg(long, default_value_t = 2)]
    classes: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = false)]
    exclude_background: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// SAR PGM files to segment
    inputs: Vec<PathBuf>,
    /// Use the SAR column of a manifest instead of positional inputs
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// components | blocks | temperature
    suite: String,
    #[arg(long)]
    out: PathBuf,
    /// Dataset seed (the training seed set is fixed)
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides both stage epoch budgets
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return 2;
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("HFD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .with_context(|| format!("HFD_THREADS must be a number, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .context("installing the worker pool")?;
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(args) => generate(args),
        Command::TrainTeacher(args) => train(args, Stage::Teacher),
        Command::TrainStudent(args) => train(args, Stage::Student),
        Command::Eval(args) => eval(args),
        Command::Infer(args) => infer(args),
        Command::Gradcheck => run_gradcheck(),
        Command::Ablate(args) => run_ablate(args),
    }
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let cfg = GenConfig {
        seed: args.seed,
        image_size: args.size,
        num_classes: args.classes,
        ..GenConfig::default()
    };
    let samples = generate_dataset(&cfg, args.count)?;
    let manifest = write_manifest(&samples, &args.out)?;
    println!(
        "wrote {} samples ({} files) and {}",
        args.count,
        args.count * 3,
        manifest.display()
    );
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Teacher,
    Student,
}

/// flags > config file > defaults
fn merge_train_config(args: &TrainArgs, stage: Stage) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        cfg.load_file(path)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        match stage {
            Stage::Teacher => cfg.teacher_epochs = epochs,
            Stage::Student => cfg.student_epochs = epochs,
        }
    }
    if let Some(batch) = args.batch {
        cfg.batch_size = batch;
    }
    if let Some(lr) = args.lr {
        cfg.lr0 = lr;
    }
    if let Some(t) = args.temperature {
        cfg.loss.temperature = t;
    }
    if let Some(l) = args.lambda {
        cfg.loss.lambda = l;
    }
    if let Some(v) = &args.focal_variant {
        cfg.loss.focal_variant = v.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: TrainArgs, stage: Stage) -> anyhow::Result<()> {
    if stage == Stage::Teacher && args.teacher.is_some() {
        bail!("--teacher only applies to train-student");
    }
    let cfg = merge_train_config(&args, stage)?;
    let arch = ModelConfig::full(args.classes);
    let outcome = match (stage, cfg.precision) {
        (Stage::Teacher, Precision::F32) => {
            train_teacher::<f32>(&args.manifest, &args.out, &cfg, &arch)?
        }
        (Stage::Teacher, Precision::F64) => {
            train_teacher::<f64>(&args.manifest, &args.out, &cfg, &arch)?
        }
        (Stage::Student, Precision::F32) => train_student::<f32>(
            &args.manifest,
            args.teacher.as_deref(),
            &args.out,
            &cfg,
            &arch,
            &[Block::D3],
        )?,
        (Stage::Student, Precision::F64) => train_student::<f64>(
            &args.manifest,
            args.teacher.as_deref(),
            &args.out,
            &cfg,
            &arch,
            &[Block::D3],
        )?,
    };
    println!(
        "best train mIoU {:.4} at epoch {}; checkpoint {}",
        outcome.best_miou,
        outcome.best_epoch,
        outcome.checkpoint.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    // Checkpoints carry their dtype; training defaults to f32.
    let model = checkpoint::load_model::<f32>(&args.checkpoint)?;
    let samples = load_manifest(&args.manifest)?;
    let cm = evaluate_model(&model, &samples, InputKind::Sar, 8)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let csv = args.out.join("metrics.csv");
    write_eval_csv(&csv, &cm, !args.exclude_background)?;
    let summary = MetricSummary::from_matrix(&cm, !args.exclude_background)?;
    println!(
        "acc {:.4}  miou {:.4}  f1 {:.4}  -> {}",
        summary.accuracy,
        summary.mean_iou,
        summary.f1,
        csv.display()
    );
    Ok(())
}

fn infer(args: InferArgs) -> anyhow::Result<()> {
    let model = checkpoint::load_model::<f32>(&args.checkpoint)?;
    let mut inputs = args.inputs.clone();
    if let Some(manifest) = &args.manifest {
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(manifest)
            .with_context(|| format!("reading {}", manifest.display()))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut cols = line.split_whitespace();
            let sar = cols
                .nth(1)
                .with_context(|| format!("manifest line without a SAR column: {line:?}"))?;
            inputs.push(dir.join(sar));
        }
    }
    if inputs.is_empty() {
        bail!("no inputs: pass SAR PGM paths or --manifest");
    }
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let k = model.num_classes();
    for (i, path) in inputs.iter().enumerate() {
        let (w, h, img) = read_pgm(path)?;
        if w != h {
            bail!("{}: expected square input, got {w}x{h}", path.display());
        }
        let mask = predict_mask(&model, &img, w)?;
        let pred_path = args.out.join(format!("pred_{i:04}.pgm"));
        write_index_pgm(&pred_path, w, h, &mask)?;
        // Per-class gray levels for quick visual inspection.
        let viz: Vec<u8> = mask
            .iter()
            .map(|&c| ((c as usize * 255) / (k - 1).max(1)) as u8)
            .collect();
        write_index_pgm(&args.out.join(format!("viz_{i:04}.pgm")), w, h, &viz)?;
        println!("{} -> {}", path.display(), pred_path.display());
    }
    Ok(())
}

fn run_gradcheck() -> anyhow::Result<()> {
    let reports = gradcheck::run_suite()?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{:24} max rel err {:.3e} over {} instances  {}",
            r.name,
            r.max_rel_err,
            r.instances,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} operations exceeded the {} tolerance", gradcheck::TOLERANCE);
    }
    Ok(())
}

fn run_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let suite: Suite = args.suite.parse()?;
    let mut cfg = AblateConfig::standard_binary();
    if let Some(path) = &args.config {
        cfg.train.load_file(path)?;
    }
    if let Some(seed) = args.seed {
        cfg.gen.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.teacher_epochs = epochs;
        cfg.train.student_epochs = epochs;
    }
    if let Some(classes) = args.classes {
        cfg.gen.num_classes = classes;
    }
    let report = ablate(suite, &cfg, &args.out)?;
    println!("wrote {}", report.csv.display());
    for row in &report.rows {
        println!("{:10} mean mIoU {:.4}", row.config, row.miou_mean());
    }
    Ok(())
}

