use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "advflyp", version, about = "Adversarial contrastive finetuning of toy dual encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic paired dataset (train/ and eval/ splits).
    Synth {
        /// JSON synthetic data description; the frozen benchmark when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean contrastive pretraining from a random initialization.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Labeled split for end-of-epoch scoring (default: <data>/eval).
        #[arg(long)]
        proxy: Option<PathBuf>,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Adversarial finetuning of the vision encoder.
    Finetune {
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        reg_logit: bool,
        #[arg(long)]
        reg_feat: bool,
        #[arg(long)]
        proxy: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Zero-shot clean and robust accuracy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// e.g. "pgd:eps=0.00392,steps=10;cw:eps=0.00392,steps=10"
        #[arg(long, default_value = "pgd:eps=0.00392,steps=10;cw:eps=0.00392,steps=10")]
        attacks: String,
        #[arg(long)]
        report: PathBuf,
        /// Also append a table row to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Clean and adversarial embeddings as TSV.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "pgd:eps=0.00392,steps=10")]
        attack: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
