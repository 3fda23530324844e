//! `cdvqa`: generate, summarize and score change-QA corpora, and exercise the
//! change-scan kernel and toy model.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdvqa_core::io::{load_mask, load_predictions, load_qa_jsonl, write_qa_jsonl, DatasetManifest};
use cdvqa_core::qa::{dataset_stats, generate_corpus, GenConfig, SigmaMode};
use cdvqa_core::{score, DataError, SemanticMask};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use tcssm::bench::scan_bench;
use tcssm::kernel::gradcheck::{gradcheck_with, GradcheckOptions};
use tcssm::kernel::{DeltaMode, Discretization, ScanConfig, ScanDims};
use tcssm::model::{Fusion, TextModeSetting};
use tcssm::train::{train_toy, train_with_ablation, TrainConfig};
use tcssm::{KernelError, ModelError};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "cdvqa", version, about = "Change-detection QA toolkit")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate 40 QA records per manifest entry as JSONL.
    Generate(GenerateArgs),
    /// Summarize a QA corpus.
    Stats(StatsArgs),
    /// Score predictions against gold answers.
    Eval(EvalArgs),
    /// Finite-difference check of the scan and prediction gradients.
    Gradcheck(GradcheckArgs),
    /// Compare reference and chunked scan throughput.
    ScanBench(BenchArgs),
    /// Train the toy model on synthetic scenes.
    TrainToy(TrainArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaArg {
    Population,
    Rms,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Spread measure for the spatial-pattern rule.
    #[arg(long, value_enum, default_value = "population")]
    sigma: SigmaArg,
    /// Nearest-neighbor resize every mask to WIDTHxHEIGHT before generating.
    #[arg(long, value_parser = parse_size)]
    resize: Option<(usize, usize)>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    qa: PathBuf,
    /// Whitespace-separated per-image destruction percentages used for the
    /// severity distribution instead of the severity answers.
    #[arg(long)]
    severity: Option<PathBuf>,
    /// Write the JSON summary here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DeltaArg {
    Mean,
    Pre,
    Post,
}

#[derive(Clone, Copy, ValueEnum)]
enum DiscArg {
    Euler,
    Zoh,
}

#[derive(Args)]
struct ScanArgs {
    /// Scan dimensions as B,L,D,N.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<ScanDims>,
    #[arg(long, value_enum, default_value = "mean")]
    delta: DeltaArg,
    #[arg(long, value_enum, default_value = "euler")]
    discretization: DiscArg,
}

impl ScanArgs {
    fn config(&self) -> ScanConfig {
        ScanConfig {
            delta_mode: match self.delta {
                DeltaArg::Mean => DeltaMode::Mean,
                DeltaArg::Pre => DeltaMode::Pre,
                DeltaArg::Post => DeltaMode::Post,
            },
            discretization: match self.discretization {
                DiscArg::Euler => Discretization::Euler,
                DiscArg::Zoh => Discretization::ExactZoh,
            },
        }
    }
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    scan: ScanArgs,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Scale analytic gradients by this factor to confirm failures are caught.
    #[arg(long)]
    fault: Option<f64>,
    /// Skip the parameter-prediction block.
    #[arg(long)]
    scan_only: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_parser = parse_dims)]
    dims: Option<ScanDims>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = tcssm::kernel::DEFAULT_CHUNK)]
    chunk: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value = "mul")]
    fusion: Fusion,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Drop the description input from the scan blocks.
    #[arg(long)]
    ablate_text: bool,
    /// Also run the opposite text setting and report both.
    #[arg(long)]
    paired: bool,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Skip the gradient check before training.
    #[arg(long)]
    no_gate: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    Ok((w, h))
}

fn parse_dims(s: &str) -> Result<ScanDims, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let [b, l, d, n] = v[..] else {
        return Err("expected B,L,D,N".into());
    };
    ScanDims::new(b, l, d, n).map_err(|e| e.to_string())
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(io_err(p)),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Io(format!("stdout: {e}"))),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let masks: Vec<(String, SemanticMask)> = manifest
        .entries
        .par_iter()
        .map(|e| Ok((e.image_id.clone(), load_mask(&e.mask_path, args.resize)?)))
        .collect::<Result<_, DataError>>()?;
    let config = GenConfig {
        sigma: match args.sigma {
            SigmaArg::Population => SigmaMode::DistanceStd,
            SigmaArg::Rms => SigmaMode::RmsRadius,
        },
    };
    let items = generate_corpus(masks.par_iter().map(|(id, m)| (id.as_str(), m)), &config);
    let file = fs::File::create(&args.out).map_err(io_err(&args.out))?;
    write_qa_jsonl(&items, file).map_err(io_err(&args.out))?;
    eprintln!("{} records for {} images", items.len(), masks.len());
    Ok(())
}

fn stats(args: StatsArgs) -> Result<(), CliError> {
    let items = load_qa_jsonl(&args.qa)?;
    let severities = match &args.severity {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            let values = text
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| (0.0..=100.0).contains(v))
                        .ok_or_else(|| CliError::Validation(format!("{}: bad percentage {t:?}", p.display())))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Some(values)
        }
        None => None,
    };
    let s = dataset_stats(&items, severities.as_deref()).map_err(|e| CliError::Validation(e.to_string()))?;
    write_output(args.out.as_deref(), &to_json(&s))
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let gold = load_qa_jsonl(&args.gold)?;
    let preds = load_predictions(&args.pred)?;
    let report = score(&gold, &preds).map_err(|e| CliError::Validation(e.to_string()))?;
    fs::write(&args.report, report.to_json() + "\n").map_err(io_err(&args.report))?;
    eprintln!(
        "OA {:.4}  AA {:.4}  macro-F1 {:.4}",
        report.overall_accuracy.0, report.average_accuracy.0, report.macro_f1.0
    );
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let dims = match args.scan.dims {
        Some(d) => d,
        None => ScanDims::new(1, 8, 3, 4)?,
    };
    let opts = GradcheckOptions {
        fault: args.fault,
        config: args.scan.config(),
        include_block: !args.scan_only,
        ..GradcheckOptions::default()
    };
    let reports = (args.seed..args.seed + args.seeds.max(1))
        .map(|s| gradcheck_with(dims, s, &opts))
        .collect::<Result<Vec<_>, _>>()?;
    for r in &reports {
        let worst = r
            .groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("at least one group");
        eprintln!(
            "seed {}: {} ({} groups, worst {} at {:.2e})",
            r.seed,
            if r.passed { "pass" } else { "FAIL" },
            r.groups.len(),
            worst.name,
            worst.max_rel_error
        );
    }
    write_output(args.report.as_deref(), &to_json(&reports))?;
    if reports.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(CliError::Validation("gradient check failed".into()))
    }
}

fn bench(args: BenchArgs, threads: usize) -> Result<(), CliError> {
    let dims = match args.dims {
        Some(d) => d,
        None => ScanDims::new(1, 4096, 16, 16)?,
    };
    let r = scan_bench(dims, args.seed, args.repeats, args.chunk, threads)?;
    eprintln!(
        "reference {:.0} tok/s, chunked {:.0} tok/s, time ratio {:.3}, max rel err {:.2e}",
        r.ref_tokens_per_sec, r.fast_tokens_per_sec, r.time_ratio, r.max_rel_error
    );
    write_output(None, &to_json(&r))
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut config = TrainConfig::new(args.seed);
    config.epochs = args.epochs;
    config.batch_size = args.batch;
    config.model.fusion = args.fusion;
    config.model.layers = args.layers;
    config.model.text_mode = if args.ablate_text {
        TextModeSetting::Ablate
    } else {
        TextModeSetting::Use
    };
    config.task.train_samples = args.samples;
    config.gradcheck_gate = !args.no_gate;
    let json = if args.paired {
        let r = train_with_ablation(&config)?;
        eprintln!(
            "held-out OA with text {:.4}, without {:.4}",
            r.with_text.heldout.overall_accuracy, r.without_text.heldout.overall_accuracy
        );
        to_json(&r)
    } else {
        let r = train_toy(&config)?;
        eprintln!(
            "loss {:.4} -> {:.4}, held-out OA {:.4} (majority {:.4})",
            r.initial_loss, r.final_loss, r.heldout.overall_accuracy, r.majority_baseline_accuracy
        );
        to_json(&r)
    };
    write_output(args.report.as_deref(), &json)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Stats(a) => stats(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ScanBench(a) => bench(a, cli.threads),
        Command::TrainToy(a) => train(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
