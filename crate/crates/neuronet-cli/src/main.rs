//! One executable for the whole pipeline: phantom data generation, queue-fed
//! training, inference, Dice evaluation, and numeric self-verification.
//!
//! Exit codes: 0 success, 1 self-test failure, 2 configuration/usage/data
//! errors, 3 I/O or file-format errors, 4 numeric aborts.

mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use neuronet::eval::{evaluate, predict_labels};
use neuronet::graph::{build_model, load_checkpoint};
use neuronet::phantom::{generate_dataset, PhantomSpec};
use neuronet::selftest::{run_selftest, Perturb};
use neuronet::train::train;
use neuronet::volume::{read_volume, split_dataset, write_volume, DatasetManifest, Split, SplitCounts};
use neuronet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "neuronet",
    about = "Volumetric multi-task segmentation pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    GenData(GenDataArgs),
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Run inference on one volume, writing a label volume per protocol.
    Infer(InferArgs),
    /// Evaluate a checkpoint against one manifest split.
    Evaluate(EvaluateArgs),
    /// Run the numeric verification suite (oracles and gradient checks).
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Phantom spec JSON; omitted means the built-in default spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory for volumes and manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subjects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional split sizes; subjects beyond their sum stay in train.
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration JSON (model + train + paths).
    #[arg(long)]
    config: PathBuf,
    /// Print the fully resolved configuration and exit without training.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Tile extents for sliding-window inference, e.g. "24" or "24,32,32";
    /// omitted runs the whole volume in one pass.
    #[arg(long, value_parser = parse_tile)]
    tile: Option<[usize; 3]>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_parser = parse_tile)]
    tile: Option<[usize; 3]>,
    /// Report directory (table, JSON, per-subject dump).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    /// Test hook: sabotage one check family (conv3d, gradients, adam,
    /// dice) to prove the harness detects failures.
    #[arg(long)]
    perturb: Option<String>,
}

fn parse_tile(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let parse = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("bad tile '{p}': {e}"));
    match parts.len() {
        1 => {
            let v = parse(parts[0])?;
            Ok([v, v, v])
        }
        3 => Ok([parse(parts[0])?, parse(parts[1])?, parse(parts[2])?]),
        _ => Err("tile must be one extent or three comma-separated extents".into()),
    }
}

fn worker_threads() -> usize {
    std::env::var("NEURONET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Data(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Pipeline(_) => 3,
        Error::Numeric(_) => 4,
        Error::Internal(_) => 70,
    }
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(path) => PhantomSpec::load(path)?,
        None => PhantomSpec::default(),
    };
    let mut manifest = generate_dataset(&spec, args.subjects, args.seed, &args.out)?;
    if args.train.is_some() || args.val.is_some() || args.test.is_some() {
        split_dataset(
            &mut manifest,
            SplitCounts {
                train: args.train.unwrap_or(0),
                val: args.val.unwrap_or(0),
                test: args.test.unwrap_or(0),
            },
            args.seed,
        )?;
        manifest.save(&args.out.join("manifest.json"))?;
    }
    println!(
        "wrote {} subjects, {} protocols to {}",
        manifest.subjects.len(),
        manifest.protocols.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let run = RunConfig::load(&args.config)?;
    if args.print_config {
        println!("{}", run.to_pretty_json());
        return Ok(());
    }
    let manifest = DatasetManifest::load(&run.manifest)?;
    let root = run
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut params = build_model::<f32>(&run.model)?;
    let summary = train(
        &mut params,
        &manifest,
        &root,
        &run.train,
        &run.out_dir,
        worker_threads(),
    )?;
    println!(
        "trained {} steps; final checkpoint {}",
        summary.steps_run,
        summary.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let params = load_checkpoint::<f32>(&args.checkpoint)?;
    let image = read_volume(&args.image)?;
    let predictions = predict_labels(&params, &image, args.tile)?;
    std::fs::create_dir_all(&args.out)?;
    let subject = args
        .image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("volume");
    for (dec, pred) in params.config().decoders.iter().zip(&predictions) {
        let path = args
            .out
            .join(format!("{subject}_{}.nnvol", dec.protocol_name));
        write_volume(&pred.to_volume(image.spacing), &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let params = load_checkpoint::<f32>(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let root = args
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let split: Split = args.split.parse()?;
    let report = evaluate(&params, &manifest, &root, split, args.tile)?;

    std::fs::create_dir_all(&args.out)?;
    let table = report.table();
    std::fs::write(args.out.join("dice_report.txt"), &table)?;
    std::fs::write(
        args.out.join("dice_report.json"),
        serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Internal(format!("report serialization: {e}")))?,
    )?;
    std::fs::write(args.out.join("per_subject.ndjson"), report.per_subject_ndjson())?;
    print!("{table}");
    Ok(())
}

fn cmd_selftest(args: &SelftestArgs) -> Result<i32> {
    let perturb = match &args.perturb {
        Some(name) => Some(Perturb::parse(name).ok_or_else(|| {
            Error::Usage(format!(
                "unknown perturb target '{name}' (conv3d, gradients, adam, dice)"
            ))
        })?),
        None => None,
    };
    let results = run_selftest(perturb)?;
    let mut failures = 0;
    for r in &results {
        println!(
            "{}: measured {:.3e}, allowed {:.3e} ... {} [{}]",
            r.name,
            r.measured,
            r.allowed,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        );
        if !r.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        eprintln!("{failures} check(s) failed");
        return Ok(1);
    }
    println!("all {} checks passed", results.len());
    Ok(0)
}

fn main() {
    let cli = Cli::parse();
    let outcome: Result<i32> = match &cli.command {
        Command::GenData(args) => cmd_gen_data(args).map(|()| 0),
        Command::Train(args) => cmd_train(args).map(|()| 0),
        Command::Infer(args) => cmd_infer(args).map(|()| 0),
        Command::Evaluate(args) => cmd_evaluate(args).map(|()| 0),
        Command::Selftest(args) => cmd_selftest(args),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}
