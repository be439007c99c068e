mod commands;
mod plots;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use restora_core::Error;

#[derive(Parser, Debug)]
#[command(name = "restora", version, about = "Toy-scale image restoration with a latent denoiser, feature restoration and task adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Key/value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for every output of the command.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Also write SVG charts.
    #[arg(long, global = true)]
    pub plots: bool,
    /// Step budget of the command's training stage.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Adapter gate normalization: softmax or sigmoid.
    #[arg(long, global = true)]
    pub gate: Option<String>,
    /// Extra `key=value` config overrides (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Degrade a directory of clean PNGs (or generated toy scenes) and write a manifest.
    Synth {
        /// Clean image directory; toy scenes are generated when absent.
        #[arg(long)]
        clean: Option<PathBuf>,
    },
    /// Pre-train the autoencoder and the task heads.
    PretrainAe,
    /// Train the restoration modules and controller.
    TrainStage1 {
        /// Pretrained checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Stage-1 checkpoint to continue.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
    },
    /// Train the task adapters and prompts.
    TrainStage2 {
        /// Stage-1 checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Add one task to a stage-2 checkpoint, training only its prompt.
    AddTask {
        #[arg(long)]
        init: Option<PathBuf>,
        /// Id of a `task.<id>.*` block in the config.
        #[arg(long)]
        task: Option<String>,
    },
    /// Evaluate a checkpoint on every configured task.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and compare the module and adapter ablations on toy data.
    Ablate {
        /// Pretrained checkpoint; pre-training runs first when absent.
        #[arg(long)]
        init: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::State(_) => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = &cli.common;
    let r = match cli.command {
        Command::Synth { clean } => commands::synth(c, clean),
        Command::PretrainAe => commands::pretrain(c),
        Command::TrainStage1 { init, resume } => commands::stage1(c, init, resume),
        Command::TrainStage2 { init } => commands::stage2(c, init),
        Command::AddTask { init, task } => commands::add_task(c, init, task),
        Command::Eval { checkpoint } => commands::eval(c, checkpoint),
        Command::Ablate { init } => commands::ablate(c, init),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
