//! `smop`: train, evaluate and inspect sparse-mixture-of-projectors models
//! on the synthetic recognition task.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use smop_core::checkpoint;
use smop_core::config::TrainConfig;
use smop_core::data::{inject_babble, Dataset, Emissions, Split};
use smop_core::harness::{
    babble_seeds, dataset_for, evaluate_dataset, expert_sweep, noise_sweep, train_with, Decode, Model,
    DEFAULT_SNR_LEVELS,
};
use smop_core::report::{losses_csv, metrics_csv, noise_csv, routing_csv, sweep_csv};
use smop_core::{Error, Result};

#[derive(Parser)]
#[command(name = "smop", version, about = "Sparse mixture of projectors on synthetic audio-visual recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a projector and LoRA adapters, writing metrics, losses, routing stats and a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Train on a saved dataset instead of generating one from the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Token error rate of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Directory for `routing_stats.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test-split TER under babble noise, one row per checkpoint.
    NoiseSweep {
        /// One or more checkpoints, e.g. an ASR and an AVSR model.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        /// SNR levels in dB.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = DEFAULT_SNR_LEVELS)]
        snr: Vec<f64>,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per expert count and report TER with parameter accounting.
    ExpertSweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [4, 8, 12, 16])]
        counts: Vec<usize>,
    },
    /// Per-expert activation proportions of a checkpoint on the test split.
    RouteStats {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transcribe one sample and print hypothesis ids and symbols.
    Decode {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Inject babble at this SNR (dB) before decoding.
        #[arg(long, allow_negative_numbers = true)]
        snr: Option<f64>,
    },
    /// Generate the configured dataset and save it.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Saved dataset; regenerated from the checkpoint's config if absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Beam width; 0 decodes greedily.
    #[arg(long, default_value_t = 0)]
    beam: usize,
    /// Logit temperature for beam scoring.
    #[arg(long, default_value_t = 0.6)]
    temperature: f64,
}

impl DecodeArgs {
    fn rule(&self) -> Decode {
        match self.beam {
            0 => Decode::Greedy,
            width => Decode::Beam {
                width,
                temperature: self.temperature,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error kind=usage msg={first:?}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { run, data } => train_cmd(&run, data.as_deref()),
        Command::Eval { model, decode, out } => {
            let (model, ds) = load_model(&model)?;
            let report = evaluate_dataset(&model, &ds, decode.rule())?;
            println!("task={} ter={}", model.task(), report.ter);
            if let Some(dir) = out {
                write_file(&dir, "routing_stats.csv", &routing_csv(&report.routing))?;
            }
            Ok(())
        }
        Command::NoiseSweep {
            checkpoint,
            snr,
            decode,
            out,
        } => {
            let mut rows = Vec::new();
            for path in &checkpoint {
                let model = checkpoint::load(path)?;
                let ds = dataset_for(&model.config)?;
                rows.extend(noise_sweep(&model, &ds, &snr, decode.rule())?);
            }
            emit(out.as_deref(), "noise.csv", &noise_csv(&rows))
        }
        Command::ExpertSweep { run, counts } => {
            let cfg = load_config(&run)?;
            let ds = dataset_for(&cfg)?;
            let rows = expert_sweep(&cfg, &ds, &counts)?;
            emit(Some(&run.out), "expert_sweep.csv", &sweep_csv(&rows))
        }
        Command::RouteStats { model, out } => {
            let (model, ds) = load_model(&model)?;
            let report = evaluate_dataset(&model, &ds, Decode::Greedy)?;
            emit(out.as_deref(), "routing_stats.csv", &routing_csv(&report.routing))
        }
        Command::Decode {
            model,
            decode,
            index,
            split,
            snr,
        } => decode_cmd(&model, &decode, index, split.into(), snr),
        Command::GenData { config, out } => {
            let cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            let ds = dataset_for(&cfg)?;
            ds.save(&out)?;
            println!(
                "wrote {} ({} train, {} val, {} test)",
                out.display(),
                ds.train.len(),
                ds.val.len(),
                ds.test.len()
            );
            Ok(())
        }
    }
}

fn load_config(run: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = match &run.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_model(args: &ModelArgs) -> Result<(Model, Dataset)> {
    let model = checkpoint::load(&args.checkpoint)?;
    let ds = match &args.data {
        Some(p) => Dataset::load(p)?,
        None => dataset_for(&model.config)?,
    };
    Ok((model, ds))
}

fn train_cmd(run: &RunArgs, data: Option<&Path>) -> Result<()> {
    let cfg = load_config(run)?;
    let ds = match data {
        Some(p) => Dataset::load(p)?,
        None => dataset_for(&cfg)?,
    };
    let out = train_with(&cfg, &ds, |e| {
        let val = e.val.map_or(String::new(), |v| format!(" val_nll={:.4}", v.nll));
        eprintln!("epoch {} lr={:.3e} train_total={:.4}{val}", e.epoch, e.lr, e.train.total);
    })?;
    fs::create_dir_all(&run.out)?;
    write_file(&run.out, "metrics.csv", &metrics_csv(&out.metrics))?;
    write_file(&run.out, "losses.csv", &losses_csv(&out.metrics))?;
    write_file(&run.out, "routing_stats.csv", &routing_csv(&out.metrics.routing))?;
    checkpoint::save(&out.model, &run.out.join("checkpoint.bin"))?;
    println!("task={} test_ter={} out={}", out.metrics.task, out.metrics.test_ter, run.out.display());
    Ok(())
}

fn decode_cmd(args: &ModelArgs, decode: &DecodeArgs, index: usize, split: Split, snr: Option<f64>) -> Result<()> {
    let (model, ds) = load_model(args)?;
    let samples = ds.split(split);
    let mut sample = samples
        .get(index)
        .ok_or_else(|| Error::Contract(format!("index {index} out of range for {} samples", samples.len())))?
        .clone();
    if let Some(snr) = snr {
        let em = Emissions::new(&ds.spec)?;
        sample = inject_babble(&sample, &ds.spec, &em, snr, &babble_seeds(ds.seed, index))?;
    }
    let hyp = model.transcribe(std::slice::from_ref(&sample), decode.rule())?.remove(0);
    println!("ref={} symbols={}", ids(&sample.y), symbols(&sample.y));
    println!("hyp={} symbols={}", ids(&hyp), symbols(&hyp));
    Ok(())
}

fn ids(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Symbol ids as base-36 digits, `?` past `z`.
fn symbols(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| u32::try_from(t).ok().and_then(|t| char::from_digit(t, 36)).unwrap_or('?'))
        .collect()
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), text)?;
    Ok(())
}

/// Prints `text` and, given a directory, also writes it there.
fn emit(dir: Option<&Path>, name: &str, text: &str) -> Result<()> {
    print!("{text}");
    match dir {
        Some(d) => write_file(d, name, text),
        None => Ok(()),
    }
}
