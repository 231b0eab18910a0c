use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use m3rec::commands::{self, ProbeModel};
use m3rec::config::ExperimentConfig;
use m3rec::report;

/// Meta-learned, model-based slate recommendation: simulate, train and
/// evaluate.
#[derive(Parser, Debug)]
#[command(name = "m3rec", version)]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set schedule.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train and test logs from the simulator.
    Simulate,
    /// Meta-train on the run's train logs.
    Train {
        /// Comma-separated ablations: no_context, no_mi, model_free, detach_rec_in_mi.
        #[arg(long, value_name = "LIST", default_value = "")]
        ablate: String,
    },
    /// One-shot online evaluation on held-out simulated users.
    EvalOnline {
        /// Checkpoints to evaluate. Defaults to the run's checkpoint.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Skip the random, logging and affinity-oracle rows.
        #[arg(long, default_value_t = false)]
        no_baselines: bool,
    },
    /// Offline reranking metrics on the run's test logs.
    EvalOffline {
        /// Checkpoints to evaluate; several are reported as mean ± std across runs.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Model error of the user model under the current and the oracle policy.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Which choice model to compare against the true users.
        #[arg(long, value_enum, default_value_t = ProbeModel::Learned)]
        model: ProbeModel,
    },
    /// Convert a delimited session log into train/test logs.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Optional item embeddings (id, then values), same delimiter.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> m3rec::Result<String> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Simulate => {
            let (a, b) = commands::simulate(&cfg)?;
            Ok(format!(
                "wrote {a} train and {b} test trajectories to {}",
                cfg.paths.dir.display()
            ))
        }
        Command::Train { ablate } => {
            for flag in ablate.split(',') {
                cfg.ablations.apply_flag(flag.trim())?;
            }
            let r = commands::train(&cfg)?;
            Ok(report::train_summary(&r).trim_end().to_string())
        }
        Command::EvalOnline {
            checkpoints,
            no_baselines,
        } => Ok(commands::eval_online(&cfg, &checkpoints, !no_baselines)?.report()),
        Command::EvalOffline { checkpoints } => Ok(commands::eval_offline(&cfg, &checkpoints)?.report()),
        Command::Probe { checkpoint, model } => Ok(commands::probe(&cfg, checkpoint.as_deref(), model)?.report()),
        Command::Ingest { input, embeddings } => {
            let g = commands::ingest(&cfg, &input, embeddings.as_deref())?;
            for w in g.warnings() {
                eprintln!("warning: {w}");
            }
            Ok(format!(
                "ingested {} sessions over {} items into {}",
                g.trajectories.len(),
                g.item_ids.len(),
                cfg.paths.dir.display()
            ))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", first.trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(out) => {
            println!("{}", out.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
