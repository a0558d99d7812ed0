use std::path::PathBuf;
use std::process::ExitCode;

use brokenbind::commands::{self, TrainOptions};
use brokenbind::{CliError, CliResult, RunConfig};
use brokenbind_core::eval::ModalityFlow;
use brokenbind_core::trainer::Arm;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "brokenbind", version, about = "Bind modalities across datasets that never observe them together")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the configured datasets and write them as .bbdata files.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train encoders on generated data; writes a checkpoint and log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from <out>/checkpoint.bbckpt if present.
        #[arg(long)]
        resume: bool,
        /// Stop after this many logged epochs (counted across stages).
        #[arg(long)]
        stop_after: Option<usize>,
        /// Loss-weight projection to train under.
        #[arg(long, default_value = "full")]
        arm: String,
    },
    /// Score a checkpoint on the test split and export a 2D projection.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to eval.flow from the config.
        #[arg(long)]
        flow: Option<String>,
        /// Arm the checkpoint was trained under.
        #[arg(long, default_value = "full")]
        arm: String,
    },
    /// Train every (arm, seed) pair and tabulate mAP.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated arms; defaults to eval.arms.
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<String>>,
        /// Comma-separated seeds; defaults to eval.seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Sweep the number of consistency pretraining epochs.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Write CSV copies of generated datasets.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_arm(s: &str) -> CliResult<Arm> {
    Arm::parse(s).map_err(|e| CliError::Config(format!("--arm: {e}")))
}

fn parse_flow(s: &str) -> CliResult<ModalityFlow> {
    ModalityFlow::parse(s).map_err(|e| CliError::Config(format!("--flow {s:?}: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let cfg = RunConfig::load(&config)?;
            commands::cmd_generate(&cfg, seed.unwrap_or(cfg.seed), &out)
        }
        Command::Train { config, data, out, seed, resume, stop_after, arm } => {
            let cfg = RunConfig::load(&config)?;
            let opts = TrainOptions { arm: parse_arm(&arm)?, resume, stop_after };
            commands::cmd_train(&cfg, seed.unwrap_or(cfg.seed), &data, &out, &opts).map(|_| ())
        }
        Command::Eval { config, checkpoint, data, out, flow, arm } => {
            let cfg = RunConfig::load(&config)?;
            let flow = match flow {
                Some(f) => parse_flow(&f)?,
                None => cfg.flow()?,
            };
            let s = commands::cmd_eval(&cfg, &checkpoint, &data, &flow, parse_arm(&arm)?, &out)?;
            println!("{} mAP {:.4} over {} queries", s.flow, s.map, s.n_queries);
            Ok(())
        }
        Command::Ablate { config, out, arms, seeds } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(a) = arms {
                cfg.eval.arms = a;
            }
            let arms = cfg.arms()?;
            let seeds = seeds.unwrap_or_else(|| cfg.eval.seeds.clone());
            let doc = commands::cmd_ablate(&cfg, &arms, &seeds, commands::threads_from_env()?, &out)?;
            for a in &doc.arms {
                println!("{:<10} mAP {:.4} ± {:.4}", a.arm, a.mean, a.std);
            }
            Ok(())
        }
        Command::Sweep { config, out, seeds } => {
            let cfg = RunConfig::load(&config)?;
            let seeds = seeds.unwrap_or_else(|| cfg.eval.seeds.clone());
            let doc = commands::cmd_sweep(&cfg, &cfg.eval.pretrain_sweep, &seeds, commands::threads_from_env()?, &out)?;
            for p in &doc.points {
                println!("pretrain {:>3}: mAP {:.4} ± {:.4}", p.pretrain_epochs, p.mean, p.std);
            }
            Ok(())
        }
        Command::Export { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            commands::cmd_export(&cfg, &data, &out).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with 2 on usage errors, matching the config-error code.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
