mod commands;
mod config;
mod error;
mod fetch;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunArgs;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "cogtran", version, about = "Proto-word reconstruction and cognate reflex prediction")]
struct Cli {
    /// run on one thread (bit-identical results either way)
    #[arg(long, global = true)]
    single_thread: bool,
    /// only log warnings and errors
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

/// Where the words to align come from.
#[derive(Debug, Clone, Args)]
pub struct WordSource {
    /// wordlist file or directory
    #[arg(long, conflicts_with = "set")]
    pub data: Option<PathBuf>,
    /// one cognate set given inline as language:"ipa segments"
    #[arg(long, num_args = 1.., value_name = "LANG:FORM")]
    pub set: Vec<String>,
    /// write here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Download the public corpora and convert them to wordlist TSV
    Fetch {
        #[arg(long, default_value = "data/fetched")]
        out: PathBuf,
        /// manifest JSON (default: the built-in one)
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// use a local tarball for a manifest source: NAME=PATH
        #[arg(long, value_name = "NAME=PATH")]
        source: Vec<String>,
    },
    /// Align each cognate set
    Align(WordSource),
    /// Align and trim each cognate set
    Trim(WordSource),
    /// Build the token vocabulary of a corpus
    Vocab {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "reflex")]
        task: String,
        #[arg(long)]
        proto_lang: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train on reflex prediction without proto-language words
    Pretrain(RunArgs),
    /// Train from scratch, optionally holding out a test split
    Train(RunArgs),
    /// Continue training a saved model
    Finetune {
        /// run directory or model archive to start from
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Predict one word from its cognates
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, num_args = 1.., required = true, value_name = "LANG:FORM")]
        set: Vec<String>,
        #[arg(long)]
        target: String,
    },
    /// Score a saved model on a wordlist
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// default: the task the model was trained for
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        proto_lang: Option<String>,
        /// also print the per-family table
        #[arg(long)]
        per_family: bool,
        /// output directory (default: the model's run directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-fold cross-validation
    Cv(RunArgs),
    /// Rank sound exchange errors in a predictions file
    Errors {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = 30)]
        top: usize,
        /// output directory (default: beside the predictions)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Fetch { out, manifest, source } => commands::fetch(&out, manifest.as_deref(), &source),
        Command::Align(src) => commands::align(&src, false),
        Command::Trim(src) => commands::align(&src, true),
        Command::Vocab {
            data,
            task,
            proto_lang,
            out,
        } => commands::vocab(&data, &task, proto_lang.as_deref(), out.as_deref()),
        Command::Pretrain(args) => commands::pretrain(&args.resolve()?),
        Command::Train(args) => commands::train(&args.resolve()?),
        Command::Finetune { model, run } => commands::finetune(&model, &run),
        Command::Predict { model, set, target } => commands::predict(&model, &set, &target),
        Command::Eval {
            model,
            data,
            task,
            proto_lang,
            per_family,
            out,
        } => commands::eval(&model, &data, task.as_deref(), proto_lang.as_deref(), per_family, out.as_deref()),
        Command::Cv(args) => commands::cv(&args.resolve()?),
        Command::Errors { predictions, top, out } => commands::errors(&predictions, top, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if cli.single_thread {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .expect("thread pool is configured once");
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
