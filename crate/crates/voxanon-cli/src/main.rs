//! The `voxanon` binary: argument parsing, config resolution
//! (flag > `$VOXANON_CONFIG` > built-in defaults, with per-command flag
//! overrides on top), and machine-readable error reporting. On failure
//! a single JSON error record goes to stderr and the exit code is
//! nonzero; on success each command prints its result as line-delimited
//! JSON on stdout.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use voxanon_cli::commands;
use voxanon_core::anonymizer::AnonMode;
use voxanon_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "voxanon",
    version,
    about = "Emotion-preserving speaker anonymization: synthesize corpora, train the codec, anonymize audio, and evaluate privacy/utility"
)]
struct Cli {
    /// Run configuration (TOML). Falls back to $VOXANON_CONFIG, then to
    /// built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override every seed in the config (corpus/model, shuffle, and
    /// anonymization streams).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled synthetic corpus on disk.
    SynthData {
        /// Output corpus directory (WAVs, manifest, config copy).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the codec on a saved corpus; writes checkpoint.json,
    /// pool.json, train-log.jsonl, and train-summary.json.
    Train {
        /// Corpus directory produced by synth-data.
        #[arg(long)]
        corpus: PathBuf,
        /// Output run directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Anonymize a directory of WAV files into a mirrored directory.
    Anonymize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Speaker pool artifact (pool.json from train).
        #[arg(long)]
        pool: PathBuf,
        /// Input directory of .wav files.
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        /// Output directory for anonymized WAVs.
        #[arg(long)]
        out: PathBuf,
        /// Weight on the pool average (0..=1); 1 - alpha goes to the
        /// Gaussian draw.
        #[arg(long)]
        alpha: Option<f64>,
        /// Distinct pool entries averaged per pseudo-identity.
        #[arg(long)]
        m: Option<usize>,
        /// Pseudo-identity scope: per-utterance, per-speaker, or bypass.
        #[arg(long)]
        mode: Option<String>,
        /// Corpus manifest.jsonl mapping file stems to speakers
        /// (required for meaningful per-speaker mode).
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Run the privacy/utility protocol; writes a metrics report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Output report path (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train variant/seed grids on one corpus and tabulate metrics.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        /// Output comparison table path (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Variants: full, no_spk, no_lin, no_emo, alpha=X, m=N, k=N,
        /// grl=X.
        #[arg(long, value_delimiter = ',', default_value = "full,no_spk,no_lin,no_emo")]
        variants: Vec<String>,
        /// Training seeds; metrics are reported per (variant, seed).
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        seeds: Vec<u64>,
    },
    /// Probe quantizer-layer subsets for speaker/content/emotion
    /// information.
    ProbeLayers {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated subsets like "1", "2:8", "1:8+s"; omit to
        /// probe the standard rows.
        #[arg(long)]
        layers: Option<String>,
        /// Output report path (one JSON record per subset).
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(text: &str) -> Result<AnonMode> {
    match text {
        "per-utterance" => Ok(AnonMode::PerUtterance),
        "per-speaker" => Ok(AnonMode::PerSpeaker),
        "bypass" => Ok(AnonMode::Bypass),
        other => Err(Error::Config(format!(
            "unknown anonymization mode '{other}' (expected per-utterance, per-speaker, or bypass)"
        ))),
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Audio(_) => "audio",
        Error::Shape(_) => "shape",
        Error::Config(_) => "config",
        Error::Data(_) => "data",
        Error::Quantizer(_) => "quantizer",
        Error::Train(_) => "train",
        Error::Eval(_) => "eval",
        Error::Checkpoint(_) => "checkpoint",
        Error::Io { .. } => "io",
        Error::Serde(_) => "serde",
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = commands::resolve_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.anon.seed = seed;
    }
    match cli.cmd {
        Cmd::SynthData { out } => {
            let summary = commands::cmd_synth_data(&cfg, &out)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Cmd::Train { corpus, out, epochs } => {
            if let Some(epochs) = epochs {
                cfg.train.epochs = epochs;
            }
            let summary = commands::cmd_train(&cfg, &corpus, &out)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Cmd::Anonymize { checkpoint, pool, input, out, alpha, m, mode, labels } => {
            let mut anon = cfg.anon.clone();
            if let Some(alpha) = alpha {
                anon.alpha = alpha;
            }
            if let Some(m) = m {
                anon.m = m;
            }
            if let Some(mode) = mode {
                anon.mode = parse_mode(&mode)?;
            }
            let summary = commands::cmd_anonymize(
                &checkpoint,
                &pool,
                &input,
                &out,
                &anon,
                labels.as_deref(),
            )?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Cmd::Evaluate { checkpoint, pool, corpus, out } => {
            let report = commands::cmd_evaluate(&cfg, &checkpoint, &pool, &corpus, &out)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Cmd::Ablate { corpus, out, variants, seeds } => {
            let report = commands::cmd_ablate(&cfg, &corpus, &variants, &seeds, &out)?;
            for row in &report.rows {
                println!("{}", serde_json::to_string(row)?);
            }
        }
        Cmd::ProbeLayers { checkpoint, corpus, layers, out } => {
            let reports =
                commands::cmd_probe_layers(&cfg, &checkpoint, &corpus, layers.as_deref(), &out)?;
            for report in &reports {
                println!("{}", serde_json::to_string(report)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": error_kind(&e),
                "message": e.to_string(),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
