use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "wsloc", about = "Weakly supervised pointwise localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes-on-noise dataset with ground-truth masks
    Synth {
        /// Dataset spec file (key = value)
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a config file
    Train {
        /// Run config file (key = value)
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoint, manifest and logs
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Also write a CSV log of every erasing step
        #[arg(long)]
        log_erasing: bool,
    },
    /// Evaluate a checkpoint on a dataset folder
    Eval {
        /// Checkpoint written by `train`
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory (class subfolders, optional masks/)
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metric CSVs
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict masks and labels for standalone images
    Predict {
        /// Checkpoint written by `train`
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory for PNG masks and labels.csv
        #[arg(long)]
        out: PathBuf,
        /// Input images (PNG/BMP/PNM)
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { spec, out } => wsloc_cli::cmd_synth(&spec, &out),
        Command::Train {
            config,
            out,
            log_erasing,
        } => wsloc_cli::cmd_train(&config, &out, log_erasing).map(|ckpt| {
            println!("checkpoint: {}", ckpt.display());
        }),
        Command::Eval { ckpt, data, out } => wsloc_cli::cmd_eval(&ckpt, &data, &out).map(|m| {
            println!("classification error: {:.2}%", m.classification_error);
            if let (Some(fp), Some(fm)) = (m.f1_plus, m.f1_minus) {
                println!("F1+: {fp:.2}%  F1-: {fm:.2}%");
            }
        }),
        Command::Predict { ckpt, out, images } => wsloc_cli::cmd_predict(&ckpt, &images, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
