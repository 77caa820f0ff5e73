//! Command-line surface: one subcommand per training phase plus end-to-end
//! pipelines, benchmarks and ablations. Phases hand models to each other
//! through checkpoint files only.

mod commands;
mod manifest;
mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use manifest::{thread_cap, Manifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "elo-forge", version, about = "Layer-specific continual pretraining toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMethod {
    Fft,
    Elo,
    Lora,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write every corpus and instruction set of a config to a directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize a model from the config's model section.
    Init {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a full model (fft, lora) or a detached sub-model (elo) on a corpus.
    Train {
        #[arg(long, value_enum)]
        method: TrainMethod,
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detach embedding, head and the given layers into a sub-model.
    Detach {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated 1-based layer indices, e.g. `1,16`.
        #[arg(long)]
        layers: String,
        #[arg(long)]
        train_emb_head: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a trained sub-model's layers back into its donor.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        sub: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Brief full training on the leading `budget` units of a corpus.
    Align {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        budget: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter deltas between models.
    Chatvec {
        #[command(subcommand)]
        op: ChatvecOp,
    },
    /// Supervised fine-tuning on an instruction file.
    Sft {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Eval {
        #[command(subcommand)]
        op: EvalOp,
    },
    /// Time training steps of several methods and print the speedup table.
    Bench {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Comma-separated subset of fft,elo,lora.
        #[arg(long, value_delimiter = ',', default_value = "fft,elo,lora")]
        methods: Vec<TrainMethod>,
        /// Run the arms one after another with nothing else scheduled.
        #[arg(long)]
        exclusive: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
    Ablate {
        #[command(subcommand)]
        op: AblateOp,
    },
    /// End-to-end run with one checkpoint per phase.
    Pipeline {
        #[arg(value_enum)]
        kind: PipelineKind,
        #[command(flatten)]
        cfg: ConfigArg,
        /// Defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reuse phase checkpoints already present in the output directory.
        #[arg(long)]
        resume: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum ChatvecOp {
    /// `minuend − subtrahend`.
    Diff {
        #[arg(long)]
        minuend: PathBuf,
        #[arg(long)]
        subtrahend: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// `model + delta`.
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        delta: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalOp {
    /// Perplexity of a model on a corpus file.
    Ppl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Tokenizer and batch settings; defaults apply without it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Exact-match accuracy per language on an instruction file.
    Instr {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum AblateOp {
    /// Full ELO pipeline per layer selection.
    Layers {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Stop after alignment instead of running SFT per selection.
        #[arg(long)]
        no_sft: bool,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Alignment budgets from one shared pre-align model.
    AlignBudget {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PipelineKind {
    Elo,
    Fft,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = thread_cap() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(cli.command, &args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
