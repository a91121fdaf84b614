//! `iseg`: generate data, train, evaluate, compare and report.
//!
//! Exit codes: 0 success, 2 invalid flags or config, 3 I/O failure,
//! 4 incompatible dataset, 5 checkpoint mismatch.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use iseg::report::{compare_table, run_text, write_plots};
use iseg::scenegen::{generate_dataset, load_dataset, Dataset, GenConfig, Split};
use iseg::train::{
    check_compatible, evaluate_checkpoint, evaluate_oracle, load_network, parse_size, train_with, write_eval, write_run, Experiment,
    RunSummary, TrainConfig, CONFUSION_FILE,
};
use iseg::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DATASET: u8 = 4;
const EXIT_CHECKPOINT: u8 = 5;

#[derive(Parser)]
#[command(name = "iseg", version, about = "Joint intrinsic image decomposition and semantic segmentation at desk scale")]
#[command(after_help = "Set ISEG_THREADS to cap internal parallelism.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with exact albedo, shading and label ground truth
    GenData(GenDataArgs),
    /// Train one experiment configuration and evaluate it on the test split
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the ground-truth oracle) on a dataset split
    Eval(EvalArgs),
    /// Tabulate finished runs side by side
    Compare(CompareArgs),
    /// Write a text report and optional plots for a finished run
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of scenes
    #[arg(long, default_value_t = 40)]
    scenes: usize,
    /// Light rigs rendered per scene
    #[arg(long, default_value_t = 5)]
    rigs: usize,
    /// Number of semantic classes (1 to 8)
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Image size as HxW
    #[arg(long, default_value = "96x128")]
    size: String,
    /// Master seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(after_help = "Precedence: command-line flag > --set > config file > built-in default.\n\
Recognised keys: experiment, epochs, seed, batch_size, lr, rho, eps, weight_decay, gamma_smse, gamma_mse, \
gamma_r, gamma_s, gamma_ce, gamma_il, intrinsic_scale, w, alpha_mode, class_weighting, encoder_features, \
mirror_links, inter_connections, trainable_heads, train_encoder, resolution, train_limit, cascade_source, \
init_checkpoint, eval_every_epoch.")]
struct TrainArgs {
    /// Config file of key=value lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// single_intrinsics | single_segmentation | cascade_albedo_to_seg | cascade_seg_to_intrinsics | joint
    #[arg(long)]
    experiment: Option<String>,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Run output directory
    #[arg(long)]
    out: PathBuf,
    /// Training epochs (required here or in the config file)
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for initialisation and batch order [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Batch size, at least 2 [default: 4]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adadelta learning rate [default: 0.01]
    #[arg(long)]
    lr: Option<f64>,
    /// Intrinsic-loss multiplier of the joint loss [default: 2]
    #[arg(long)]
    w: Option<f64>,
    /// Any config key as KEY=VALUE; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "oracle"])))]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long, conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Score the ground truth against itself instead of a checkpoint
    #[arg(long)]
    oracle: bool,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate: test | train
    #[arg(long, default_value = "test")]
    split: String,
    /// Checkpoint whose predictions feed a cascade model instead of ground truth
    #[arg(long, conflicts_with = "oracle")]
    cascade_source: Option<PathBuf>,
    /// Directory for eval.txt, eval.kv and confusion.csv
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    runs: Vec<PathBuf>,
    /// Directory for compare.txt and per-run confusion matrices
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory
    #[arg(long)]
    run: PathBuf,
    /// Also render loss curves and per-class IoU bars as PPM images
    #[arg(long)]
    plots: bool,
    /// Output directory [default: the run directory]
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

type CliResult = Result<(), Failure>;

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

/// Default mapping from library errors to exit codes.
fn classify(e: Error) -> Failure {
    let code = match &e {
        Error::Io(_) => EXIT_IO,
        Error::Dataset(_) | Error::LabelRange { .. } => EXIT_DATASET,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        _ => EXIT_USAGE,
    };
    fail(code, e.to_string())
}

fn open_dataset(dir: &Path) -> Result<Dataset, Failure> {
    load_dataset(dir).map_err(|e| fail(EXIT_DATASET, e.to_string()))
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let (height, width) = parse_size(&a.size).map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    let cfg = GenConfig {
        num_scenes: a.scenes,
        rigs_per_scene: a.rigs,
        num_classes: a.classes,
        height,
        width,
        master_seed: a.seed,
    };
    let m = generate_dataset(&cfg, &a.out).map_err(classify)?;
    let train = m.entries(Split::Train).count();
    println!(
        "wrote {} samples to {} (train {}, test {}; scenes train {}, test {})",
        m.num_samples,
        a.out.display(),
        train,
        m.num_samples - train,
        m.scenes(Split::Train).len(),
        m.scenes(Split::Test).len()
    );
    Ok(())
}

fn build_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let usage = |e: Error| fail(EXIT_USAGE, e.to_string());
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))?;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fail(EXIT_USAGE, format!("{}: expected key=value, got {line:?}", path.display())))?;
            pairs.push((k.trim().into(), v.trim().into()));
        }
    }
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| fail(EXIT_USAGE, format!("--set expects KEY=VALUE, got {s:?}")))?;
        pairs.push((k.trim().into(), v.trim().into()));
    }
    let flags: [(&str, Option<String>); 6] = [
        ("experiment", a.experiment.clone()),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| format!("{v:?}"))),
        ("w", a.w.map(|v| format!("{v:?}"))),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            pairs.push((k.into(), v));
        }
    }
    let last = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    let experiment = last("experiment").ok_or_else(|| {
        let valid: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
        fail(EXIT_USAGE, format!("no experiment given; valid: {}", valid.join(", ")))
    })?;
    if last("epochs").is_none() {
        return Err(fail(EXIT_USAGE, "no epoch count given (--epochs or epochs= in the config)"));
    }
    let mut cfg = TrainConfig::new(Experiment::parse(&experiment).map_err(usage)?, 0);
    for (k, v) in &pairs {
        cfg.set(k, v).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> CliResult {
    let cfg = build_config(&a)?;
    let dataset = open_dataset(&a.data)?;
    let epochs = cfg.epochs;
    let run = train_with(&cfg, &dataset, |e| {
        println!(
            "epoch {}/{} total={:.6} ce_term={:.6} intrinsic_term={:.6}",
            e.epoch + 1,
            epochs,
            e.total,
            e.ce_term,
            e.intrinsic_term
        );
    })
    .map_err(classify)?;
    write_run(&a.out, &run).map_err(|e| fail(EXIT_IO, e.to_string()))?;
    print!("{}", run.record.eval.to_text());
    println!("run written to {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let split = Split::parse(&a.split).map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    let dataset = open_dataset(&a.data)?;
    let report = match &a.checkpoint {
        Some(path) => {
            let net = load_network(path).map_err(|e| match e {
                Error::Io(e) => fail(EXIT_IO, format!("{}: {e}", path.display())),
                e => fail(EXIT_CHECKPOINT, format!("{}: {e}", path.display())),
            })?;
            check_compatible(&net.spec, &dataset).map_err(|e| fail(EXIT_CHECKPOINT, format!("{}: {e}", path.display())))?;
            evaluate_checkpoint(&net, &dataset, split, a.cascade_source.as_deref()).map_err(classify)?
        }
        None => evaluate_oracle(&dataset, split).map_err(classify)?,
    };
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        write_eval(out, &report).map_err(|e| fail(EXIT_IO, e.to_string()))?;
    }
    Ok(())
}

fn compare(a: CompareArgs) -> CliResult {
    let runs: Vec<RunSummary> = a
        .runs
        .iter()
        .map(|d| {
            RunSummary::load(d).map_err(|e| match e {
                Error::Io(e) => fail(EXIT_IO, format!("{}: {e}", d.display())),
                e => fail(EXIT_USAGE, format!("{}: {e}", d.display())),
            })
        })
        .collect::<Result<_, _>>()?;
    let table = compare_table(&runs).map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    print!("{table}");
    if let Some(out) = &a.out {
        let io = |e: std::io::Error| fail(EXIT_IO, e.to_string());
        fs::create_dir_all(out).map_err(io)?;
        fs::write(out.join("compare.txt"), &table).map_err(io)?;
        for (dir, run) in a.runs.iter().zip(&runs) {
            let src = dir.join(CONFUSION_FILE);
            if src.exists() {
                fs::copy(&src, out.join(format!("confusion_{}.csv", run.name))).map_err(io)?;
            }
        }
    }
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    let run = RunSummary::load(&a.run).map_err(|e| match e {
        Error::Io(e) => fail(EXIT_IO, format!("{}: {e}", a.run.display())),
        e => fail(EXIT_USAGE, format!("{}: {e}", a.run.display())),
    })?;
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    let io = |e: Error| fail(EXIT_IO, e.to_string());
    fs::create_dir_all(&out).map_err(|e| io(e.into()))?;
    let text = run_text(&run);
    fs::write(out.join("report.txt"), &text).map_err(|e| io(e.into()))?;
    print!("{text}");
    if a.plots {
        for p in write_plots(&run, &out).map_err(io)? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    iseg::init_threads_from_env();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
