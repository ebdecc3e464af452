use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use omniflux::cli;

/// Tri-encoder multimodal pre-training with omni-directional retrieval
/// objectives, self-contained on CPU.
#[derive(Parser)]
#[command(name = "omniflux", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory
    GenData {
        /// key=value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output corpus directory
        #[arg(long)]
        out: PathBuf,
        /// Seed (overrides config and OMNIFLUX_SEED)
        #[arg(long)]
        seed: Option<u64>,
        /// Override a single config key, e.g. --set gen.n_pairs=500
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run one pre-training stage over a corpus
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory from gen-data
        #[arg(long)]
        data: PathBuf,
        /// 1 = fixed-K round-robin pre-training; 2 = modality-randomized
        /// image-text stage (requires --resume)
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Checkpoint to resume or build on
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory for checkpoint and metrics
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Fine-tune a downstream task head on a pre-trained checkpoint
    Finetune {
        /// cc | mpc | t2i | q2p | i2p
        #[arg(long)]
        task: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the text/fusion layer split before fine-tuning
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate the seven-task suite from fine-tuned states
    Eval {
        /// Run the full suite (the only supported mode)
        #[arg(long, required = true)]
        suite: bool,
        /// Directory holding cc.ckpt, mpc.ckpt, t2i.ckpt, q2p.ckpt, i2p.ckpt
        #[arg(long)]
        states: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the report JSON here as well as stdout
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export f/g/h embeddings for a pairs split
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Pairs-format split file inside the corpus directory
        #[arg(long, default_value = "t2i_eval.tsv")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference verification of the training losses
    GradCheck {
        /// all | mlm | mim-fr | mim-kl | itc | itm | omni
        #[arg(long, default_value = "all")]
        loss: String,
    },
}

fn run(command: Command) -> omniflux::Result<()> {
    match command {
        Command::GenData {
            config,
            out,
            seed,
            set,
        } => {
            let cfg = cli::effective_config(config.as_deref(), &set, seed)?;
            cli::cmd_gen_data(&cfg, &out)
        }
        Command::Pretrain {
            config,
            data,
            stage,
            resume,
            out,
            seed,
            set,
        } => {
            let cfg = cli::effective_config(config.as_deref(), &set, seed)?;
            cli::cmd_pretrain(&cfg, &data, stage, resume.as_deref(), &out)
        }
        Command::Finetune {
            task,
            checkpoint,
            data,
            out,
            k,
            config,
            seed,
            set,
        } => {
            let mut cfg = cli::effective_config(config.as_deref(), &set, seed)?;
            if let Some(s) = seed {
                cfg.finetune.seed = s;
            }
            cli::cmd_finetune(&cfg, &task, &checkpoint, &data, &out, k)
        }
        Command::Eval {
            suite: _,
            states,
            data,
            out,
            seed,
        } => cli::cmd_eval(&states, &data, out.as_deref(), seed.unwrap_or(0)),
        Command::Embed {
            checkpoint,
            data,
            split,
            out,
        } => cli::cmd_embed(&checkpoint, &data, &split, &out),
        Command::GradCheck { loss } => cli::cmd_grad_check(&loss),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
