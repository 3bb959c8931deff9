//! `gsr`: batch front end for data configurations, training, embedding
//! extraction and EER scoring.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 training divergence.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsr_core::dataconfig::Version;
use gsr_core::eval::{Protocol, TrialFormat};
use gsr_core::par::Exec;

#[derive(Parser, Debug)]
#[command(name = "gsr", about = "Speaker embedding training and evaluation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Worker threads; 1 runs every batch loop sequentially.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Prefix for relative descriptor, manifest and audio paths.
    #[arg(long, global = true, env = "GSR_DATA_ROOT", value_name = "DIR")]
    data_root: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compose a data configuration from descriptor files and print its totals.
    Manifest {
        #[arg(long = "version", value_name = "vN")]
        version: Version,
        /// Stub or manifest files.
        #[arg(required = true)]
        descriptors: Vec<PathBuf>,
        /// Write the composed configuration here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train from a TOML config; writes metrics.tsv and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract one embedding per WAV file.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        /// WAV files.
        wavs: Vec<PathBuf>,
        /// Text file with one WAV path per line.
        #[arg(long)]
        list: Option<PathBuf>,
        /// Trim silence at this aggressiveness (0-3) first.
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
        vad: Option<u8>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial list and report the EER.
    Eval {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, default_value = "auto")]
        format: TrialFormat,
        /// Enforce a protocol's trial counts.
        #[arg(long)]
        protocol: Option<Protocol>,
        /// Embedding file; trials are scored by cosine similarity.
        #[arg(long, conflicts_with = "scores", required_unless_present = "scores")]
        embeddings: Option<PathBuf>,
        /// Precomputed `enrol test score` file.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Write the per-trial scores here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Error raised for bad invocations that clap cannot catch.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<gsr_core::Error>() {
            return match e {
                gsr_core::Error::Config(_) => 1,
                gsr_core::Error::Diverged { .. } => 3,
                _ => 2,
            };
        }
    }
    2
}

fn executor(threads: Option<usize>) -> anyhow::Result<Exec> {
    match threads {
        Some(0) => Err(Usage("--threads must be at least 1".into()).into()),
        Some(1) => Ok(Exec::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            Ok(Exec::Parallel)
        }
        _ => Ok(Exec::auto()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let exec = executor(cli.global.threads)?;
    let root = cli.global.data_root.as_deref();
    match cli.command {
        Command::Manifest {
            version,
            descriptors,
            out,
        } => commands::manifest(version, &descriptors, out.as_deref(), root),
        Command::Train { config, seed, out } => commands::train(&config, seed, &out, root, exec),
        Command::Embed {
            checkpoint,
            wavs,
            list,
            vad,
            out,
        } => {
            let mut entries: Vec<String> = wavs.iter().map(|p| p.display().to_string()).collect();
            if let Some(list) = list {
                entries.extend(commands::read_wav_list(&list)?);
            }
            if entries.is_empty() {
                return Err(Usage("no WAV files given".into()).into());
            }
            commands::embed(&checkpoint, &entries, vad, &out, root, exec)
        }
        Command::Eval {
            trials,
            format,
            protocol,
            embeddings,
            scores,
            out,
        } => {
            let source = match (embeddings, scores) {
                (Some(e), None) => commands::ScoreSource::Embeddings(e),
                (None, Some(s)) => commands::ScoreSource::Scores(s),
                _ => return Err(Usage("give exactly one of --embeddings or --scores".into()).into()),
            };
            commands::eval(&trials, format, protocol, source, out.as_deref(), exec)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
