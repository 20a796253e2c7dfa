use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use protores::bench::{
    effector_sweep, evaluate_model, generate_5point_benchmark, generate_random_benchmark, sweep_table, BenchmarkFile,
    EffectorMix,
};
use protores::checkpoint::{inspect_checkpoint, load_checkpoint};
use protores::config::{load_config, RunConfig};
use protores::data::{
    dataset_stats, import_csv, load_dataset, save_dataset, split_by_clip, subsample_frames, synthetic_dataset, CsvSpec,
    PoseDataset, RotationColumns,
};
use protores::model::EncoderKind;
use protores::trainer::{train, TrainRun};
use protores::{EffectorRecord, SkeletonSpec};
use protores_service::{LoadedModel, ModelEntry, Registry, RotationFormat, ServeConfig, SolveOptions, SolveRequest};

#[derive(Parser)]
#[command(name = "protores", version, about = "Learned full-body inverse kinematics")]
struct Cli {
    /// TOML file with [train], [model] and [serve] tables
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed the command uses
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset
    Train(TrainArgs),
    /// Score a checkpoint on benchmark files
    Eval(EvalArgs),
    /// Generate benchmark files or run an effector sweep
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Solve one effector file
    Solve(SolveArgs),
    /// Per-joint dataset statistics
    Stats(StatsArgs),
    /// Run the HTTP/WebSocket service
    Serve(ServeArgs),
    /// Print a checkpoint manifest
    Inspect {
        checkpoint: PathBuf,
    },
    /// Create, import and split datasets
    #[command(subcommand)]
    Data(DataCommand),
}

#[derive(Args)]
struct SkeletonArg {
    /// Built-in skeleton name (humanoid64, minimal5) or a skeleton JSON file
    #[arg(long, default_value = "humanoid64")]
    skeleton: String,
}

impl SkeletonArg {
    fn load(&self) -> Result<SkeletonSpec> {
        if let Some(s) = SkeletonSpec::builtin(&self.skeleton) {
            return Ok(s);
        }
        SkeletonSpec::load(&self.skeleton).with_context(|| format!("loading skeleton {}", self.skeleton))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Psa,
    Mcdc,
    MaskedFcr,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    skeleton: SkeletonArg,
    /// Output directory for the checkpoint, optimizer state and metrics log
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in --out
    #[arg(long)]
    resume: bool,
    /// Train on the whole file instead of its 80% clip split
    #[arg(long)]
    no_split: bool,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, value_enum)]
    encoder: Option<EncoderArg>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// The dataset the benchmark files were generated from
    #[arg(long)]
    data: PathBuf,
    /// Benchmark files or directories of them
    #[arg(long, required = true, num_args = 1..)]
    bench: Vec<PathBuf>,
    #[command(flatten)]
    skeleton: SkeletonArg,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Generate the random (N = 6..12) and 5-point benchmark files
    Gen {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        skeleton: SkeletonArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics against the share of joints used as effectors
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        skeleton: SkeletonArg,
        #[arg(long, value_enum, default_value = "mixed")]
        mix: MixArg,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.25,0.5,0.75,1.0")]
        fractions: Vec<f64>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MixArg {
    Position,
    Rotation,
    Mixed,
}

#[derive(Args)]
struct SolveArgs {
    /// JSON list of effectors, or a full solve request
    #[arg(long)]
    effectors: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skeleton JSON; defaults to the one named in the checkpoint
    #[arg(long)]
    skeleton: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "quaternion")]
    rotation_format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Quaternion,
    Sixd,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    skeleton: SkeletonArg,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ServeArgs {
    /// `id=path` or a bare path (id `default`); repeatable
    #[arg(long)]
    checkpoint: Vec<String>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write a synthetic dataset
    Synth {
        #[command(flatten)]
        skeleton: SkeletonArg,
        #[arg(long, default_value_t = 20)]
        clips: usize,
        #[arg(long, default_value_t = 100)]
        frames_per_clip: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a CSV file into the binary format
    Import {
        csv: PathBuf,
        #[command(flatten)]
        skeleton: SkeletonArg,
        #[arg(long, value_enum, default_value = "quaternion")]
        rotations: RotationsArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clip-level 80/10/10 split into train/valid/test files
    Split {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        skeleton: SkeletonArg,
        #[arg(long)]
        out: PathBuf,
        /// Keep only this share of frames in each split
        #[arg(long)]
        subsample: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RotationsArg {
    Quaternion,
    EulerRadians,
    EulerDegrees,
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_data(path: &Path, skeleton: &SkeletonArg) -> Result<PoseDataset> {
    let skel = skeleton.load()?;
    load_dataset(path, &skel).with_context(|| format!("loading {}", path.display()))
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = run_config(cli)?;
    if let Some(s) = a.steps {
        cfg.train.max_steps = Some(s);
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(w) = a.width {
        cfg.model.width = w;
        cfg.model.embedding_width = w;
    }
    if let Some(e) = a.encoder {
        cfg.model.encoder = match e {
            EncoderArg::Psa => EncoderKind::Psa,
            EncoderArg::Mcdc => EncoderKind::Mcdc,
            EncoderArg::MaskedFcr => EncoderKind::MaskedFcr,
        };
    }
    let data = load_data(&a.data, &a.skeleton)?;
    let data = if a.no_split {
        data
    } else {
        split_by_clip(&data, [0.8, 0.1, 0.1], cfg.train.seed)?.0
    };
    eprintln!("training on {} frames", data.len());
    let outcome = train(
        &data.frames,
        &TrainRun {
            skeleton: &data.skeleton,
            model_config: cfg.model,
            train_config: cfg.train,
            out_dir: a.out.clone(),
            resume: a.resume,
            stop_after: None,
        },
    )?;
    if let Some(r) = &outcome.last_record {
        eprintln!("step {}: total loss {:.6e}", r.step, r.loss.total);
    }
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

fn collect_bench_files(paths: &[PathBuf]) -> Result<Vec<BenchmarkFile>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            entries.retain(|e| e.extension().is_some_and(|x| x == "json"));
            entries.sort();
            for e in entries {
                files.push(BenchmarkFile::load(&e).with_context(|| format!("reading {}", e.display()))?);
            }
        } else {
            files.push(BenchmarkFile::load(p).with_context(|| format!("reading {}", p.display()))?);
        }
    }
    if files.is_empty() {
        bail!("no benchmark files found");
    }
    Ok(files)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data, &a.skeleton)?;
    let files = collect_bench_files(&a.bench)?;
    let report = evaluate_model(&model, &files, &data)?;
    if a.json {
        print_json(&report)
    } else {
        print!("{}", report.to_table());
        Ok(())
    }
}

fn cmd_bench(cli: &Cli, c: &BenchCommand) -> Result<()> {
    match c {
        BenchCommand::Gen { data, skeleton, out } => {
            let cfg = run_config(cli)?;
            let data = load_data(data, skeleton)?;
            std::fs::create_dir_all(out)?;
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            let mut files = generate_random_benchmark(&data, seed, &cfg.train.noise())?;
            files.push(generate_5point_benchmark(&data)?);
            for f in &files {
                let path = out.join(format!("{}.json", f.name));
                f.save(&path)?;
                println!("{}", path.display());
            }
            Ok(())
        }
        BenchCommand::Sweep {
            checkpoint,
            data,
            skeleton,
            mix,
            fractions,
            json,
        } => {
            let (model, _) = load_checkpoint(checkpoint)?;
            let data = load_data(data, skeleton)?;
            let mix = match mix {
                MixArg::Position => EffectorMix::PositionOnly,
                MixArg::Rotation => EffectorMix::RotationOnly,
                MixArg::Mixed => EffectorMix::Mixed,
            };
            let rows = effector_sweep(&model, &data, mix, fractions, cli.seed.unwrap_or(0))?;
            if *json {
                print_json(&rows)
            } else {
                print!("{}", sweep_table(&rows));
                Ok(())
            }
        }
    }
}

fn cmd_solve(a: &SolveArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.effectors).with_context(|| format!("reading {}", a.effectors.display()))?;
    let mut request: SolveRequest = match serde_json::from_str::<Vec<EffectorRecord>>(&text) {
        Ok(effectors) => SolveRequest {
            model: None,
            effectors,
            options: SolveOptions::default(),
            request_id: None,
        },
        Err(_) => serde_json::from_str(&text).context("effector file is neither a list of effectors nor a solve request")?,
    };
    request.model = None;
    request.options.include_global_positions = true;
    request.options.include_latency = false;
    request.options.rotation_format = match a.rotation_format {
        FormatArg::Quaternion => RotationFormat::Quaternion,
        FormatArg::Sixd => RotationFormat::Sixd,
    };
    let loaded = LoadedModel::load("cli", &a.checkpoint, a.skeleton.as_deref())?;
    let response = Registry::new([loaded]).solve(&request)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&response)? + "\n")?;
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let data = load_data(&a.data, &a.skeleton)?;
    let stats = dataset_stats(&data)?;
    if a.json {
        print_json(&stats)
    } else {
        print!("{}", stats.to_table());
        Ok(())
    }
}

fn cmd_serve(cli: &Cli, a: &ServeArgs) -> Result<()> {
    let mut cfg: ServeConfig = match &cli.config {
        Some(p) => {
            let table: toml::Table = std::fs::read_to_string(p)?.parse()?;
            match table.get("serve") {
                Some(v) => v.clone().try_into()?,
                None => ServeConfig::default(),
            }
        }
        None => ServeConfig::default(),
    };
    cfg = cfg.with_env(std::env::vars());
    for spec in &a.checkpoint {
        let (id, path) = spec.split_once('=').unwrap_or(("default", spec.as_str()));
        cfg.models.retain(|m| m.id != id);
        cfg.models.push(ModelEntry {
            id: id.into(),
            checkpoint: path.into(),
            skeleton: None,
        });
    }
    if let Some(b) = &a.bind {
        cfg.bind = b.clone();
    }
    if a.workers.is_some() {
        cfg.workers = a.workers;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(protores_service::serve(&cfg, |addr| eprintln!("listening on {addr}")))?;
    Ok(())
}

fn cmd_data(cli: &Cli, c: &DataCommand) -> Result<()> {
    match c {
        DataCommand::Synth {
            skeleton,
            clips,
            frames_per_clip,
            out,
        } => {
            let ds = synthetic_dataset(&skeleton.load()?, *clips, *frames_per_clip, cli.seed.unwrap_or(0))?;
            save_dataset(&ds, out)?;
        }
        DataCommand::Import {
            csv,
            skeleton,
            rotations,
            out,
        } => {
            let spec = CsvSpec {
                rotations: match rotations {
                    RotationsArg::Quaternion => RotationColumns::Quaternion,
                    RotationsArg::EulerRadians => RotationColumns::EulerRadians,
                    RotationsArg::EulerDegrees => RotationColumns::EulerDegrees,
                },
                ..CsvSpec::default()
            };
            let (ds, report) = import_csv(csv, &skeleton.load()?, &spec)?;
            if let Some(d) = report.max_fk_deviation {
                eprintln!("max FK deviation {d:.3e}");
            }
            save_dataset(&ds, out)?;
            eprintln!("{} frames", report.rows);
        }
        DataCommand::Split {
            data,
            skeleton,
            out,
            subsample,
        } => {
            let ds = load_data(data, skeleton)?;
            let seed = cli.seed.unwrap_or(0);
            let (tr, va, te) = split_by_clip(&ds, [0.8, 0.1, 0.1], seed)?;
            std::fs::create_dir_all(out)?;
            for (name, part) in [("train", tr), ("valid", va), ("test", te)] {
                let part = match subsample {
                    Some(f) => subsample_frames(&part, *f, seed)?,
                    None => part,
                };
                let path = out.join(format!("{name}.prsd"));
                save_dataset(&part, &path)?;
                println!("{} ({} frames)", path.display(), part.len());
            }
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(c) => cmd_bench(cli, c),
        Command::Solve(a) => cmd_solve(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Serve(a) => cmd_serve(cli, a),
        Command::Inspect { checkpoint } => print_json(&inspect_checkpoint(checkpoint)?),
        Command::Data(c) => cmd_data(cli, c),
    }
}

fn main() -> ExitCode {
    // clap prints usage and exits with 2 on bad arguments
    let cli = Cli::parse();
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format_chain(&e));
            ExitCode::from(1)
        }
    }
}

fn format_chain(e: &anyhow::Error) -> String {
    e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ")
}

