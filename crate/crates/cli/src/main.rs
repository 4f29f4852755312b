mod commands;
mod eval;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "neurodistill", version, about = "Spike-to-LFP representation distillation on synthetic and preprocessed recordings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML); defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of this command.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Spike,
    Lfp,
    LfpConv,
    Mm,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Regime {
    Unsup,
    Sup,
    Fullsup,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired spike/LFP/behavior dataset.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Convert a raw broadband recording into a session container.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Directory holding `raw.json` and the arrays it names.
        #[arg(long)]
        input: PathBuf,
    },
    /// Masked-autoencoder pretraining over several sessions.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "spike")]
        arch: ArchArg,
        /// Comma-separated session ids (all sessions when omitted).
        #[arg(long, value_delimiter = ',')]
        sessions: Vec<String>,
    },
    /// Fine-tune a pretrained model on one session, or train one from scratch.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint; a fresh model of `--arch` when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "lfp")]
        arch: ArchArg,
        #[arg(long)]
        session: String,
        #[arg(long, value_enum, default_value = "unsup")]
        regime: Regime,
    },
    /// Distill a fine-tuned spike teacher into a new LFP model on one session.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Fine-tuned spike teacher checkpoint.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        session: String,
        /// `unsup` and `sup` train reconstruction plus alignment (the regime
        /// lives in the teacher); `fullsup` replaces reconstruction by
        /// behavior regression.
        #[arg(long, value_enum, default_value = "unsup")]
        regime: Regime,
        /// Start training the teacher jointly from this epoch.
        #[arg(long)]
        unfreeze_epoch: Option<u32>,
        /// Initialize the student from this checkpoint (e.g. a multi-session distilled model).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Distill one multi-session spike teacher into a multi-session LFP model.
    Msdistill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        sessions: Vec<String>,
    },
    /// Decoding, retrieval and CKA reports for a set of checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// `NAME=PATH`; repeat a name for additional seeds.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        /// Sessions to evaluate (every session a model knows when omitted).
        #[arg(long, value_delimiter = ',')]
        sessions: Vec<String>,
        /// Reference model for retrieval and CKA (all pairs when omitted).
        #[arg(long)]
        reference: Option<String>,
        /// Zero the spike inputs of multimodal models.
        #[arg(long)]
        zero_spikes: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = commands::init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
