use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use muscall_cli::manifest::DATA_DIR_ENV;
use muscall_cli::{
    cmd_embed, cmd_eval, cmd_retrieve, cmd_train, cmd_zeroshot, generate_synthetic, resolve, AnyCheckpoint, CliError,
    CliResult, DataSource, Overrides, SyntheticSpec,
};
use muscall_core::trainer::Split;
use serde::Serialize;

/// Contrastive audio-language training and retrieval.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
#[derive(Debug, Parser)]
#[command(name = "muscall", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Manifest file or directory holding manifest.jsonl (default: $MUSCALL_DATA_DIR).
    #[arg(long, env = DATA_DIR_ENV)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which split to use.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus (WAV files, manifest.jsonl, splits.json).
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// JSON file with a full or partial synthetic spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n_pairs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train and keep the checkpoint with the best validation R@10.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Disable relevance-based loss weighting.
        #[arg(long)]
        no_lw: bool,
        /// Use center crops instead of random crops.
        #[arg(long)]
        no_rc: bool,
        /// Disable audio augmentation.
        #[arg(long)]
        no_aa: bool,
        /// Average audio features instead of attention pooling.
        #[arg(long)]
        no_ap: bool,
        /// Add the self-supervised audio objective.
        #[arg(long)]
        ssl: bool,
        /// Validate config and data, then exit.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Retrieval metrics for both directions.
    Eval {
        #[command(flatten)]
        ck: CheckpointArgs,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-K clips for a text query.
    Retrieve {
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[command(flatten)]
        ck: CheckpointArgs,
    },
    /// Zero-shot classification by a manifest tag.
    Zeroshot {
        /// Tag key holding the class of each clip.
        #[arg(long)]
        attribute: String,
        /// Comma-separated class names (default: the tag values present).
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
        /// Template with a {label} placeholder, e.g. "a {label} track".
        #[arg(long)]
        prompt_template: Option<String>,
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump joint-space embeddings and ids.
    Embed {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: muscall_core::Error| e.to_string())
}

fn emit<T: Serialize>(value: &T, out: Option<&PathBuf>) -> CliResult<()> {
    let json = serde_json::to_string_pretty(value)?;
    if let Some(p) = out {
        std::fs::write(p, &json).map_err(|e| CliError::io(p, e))?;
    }
    println!("{json}");
    Ok(())
}

fn open(ck: &CheckpointArgs) -> CliResult<(AnyCheckpoint, DataSource)> {
    let checkpoint = AnyCheckpoint::load(&ck.checkpoint)?;
    let data = DataSource::open(ck.data.data.as_deref(), checkpoint.config())?;
    Ok((checkpoint, data))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate {
            out,
            spec,
            n_pairs,
            seed,
            noise,
        } => {
            let mut s: SyntheticSpec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSpec::default(),
            };
            s.n_pairs = n_pairs.unwrap_or(s.n_pairs);
            s.seed = seed.unwrap_or(s.seed);
            s.noise_level = noise.unwrap_or(s.noise_level);
            let corpus = generate_synthetic(&s, &out)?;
            emit(
                &serde_json::json!({
                    "manifest": corpus.manifest,
                    "splits": corpus.splits,
                    "n_pairs": corpus.rows.len(),
                    "spec": s,
                }),
                None,
            )
        }
        Command::Train {
            config,
            preset,
            seed,
            epochs,
            out,
            no_lw,
            no_rc,
            no_aa,
            no_ap,
            ssl,
            dry_run,
            data,
        } => {
            let overrides = Overrides {
                seed,
                max_epochs: epochs,
                no_lw,
                no_rc,
                no_aa,
                no_ap,
                ssl,
            };
            let cfg = resolve(config.as_deref(), preset.as_deref(), &overrides)?;
            let source = DataSource::open(data.data.as_deref(), &cfg)?;
            let summary = cmd_train(&cfg, &source, &out, dry_run)?;
            emit(&summary, None)
        }
        Command::Eval { ck, out } => {
            let (checkpoint, data) = open(&ck)?;
            emit(&cmd_eval(&checkpoint, &data, ck.split)?, out.as_ref())
        }
        Command::Retrieve { query, k, ck } => {
            let (checkpoint, data) = open(&ck)?;
            emit(&cmd_retrieve(&checkpoint, &data, ck.split, &query, k)?, None)
        }
        Command::Zeroshot {
            attribute,
            labels,
            prompt_template,
            ck,
            out,
        } => {
            let (checkpoint, data) = open(&ck)?;
            let result = cmd_zeroshot(&checkpoint, &data, ck.split, &attribute, labels, prompt_template)?;
            emit(&result, out.as_ref())
        }
        Command::Embed { ck, out } => {
            let (checkpoint, data) = open(&ck)?;
            emit(&cmd_embed(&checkpoint, &data, ck.split, &out)?, None)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
