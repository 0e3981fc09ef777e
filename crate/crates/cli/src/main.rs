use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gnnplus::graph::{RegressionParams, SbmParams};
use gnnplus::train::EVAL_BATCH_SIZE;
use gnnplus::OpKind;
use gnnplus_cli::commands::{self, GenKind};
use gnnplus_cli::{CliError, Result, RunSpec};

#[derive(Parser)]
#[command(name = "gnnplus", version, about = "Message-passing GNNs with toggleable training techniques")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Sbm,
    Regression,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write log, best checkpoint and summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: the config's `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = EVAL_BATCH_SIZE)]
        batch_size: usize,
        /// Also write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the config and each single-technique removal.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Generate a synthetic dataset as JSONL.
    GenData {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_graphs: Option<usize>,
        #[arg(long, default_value_t = 60)]
        nodes: usize,
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        #[arg(long, default_value_t = 0.3)]
        p_intra: f64,
        #[arg(long, default_value_t = 0.05)]
        p_inter: f64,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 8)]
        min_nodes: usize,
        #[arg(long, default_value_t = 16)]
        max_nodes: usize,
    },
}

fn load_spec(path: &Path, seed: Option<u64>) -> Result<RunSpec> {
    let spec = RunSpec::from_file(path)?;
    Ok(match seed {
        Some(s) => spec.with_seed(s),
        None => spec,
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Train { config, out } => {
            let spec = load_spec(&config, cli.seed)?;
            let out = commands::output_dir(&spec, out.as_ref());
            commands::cmd_train(&spec, &out)?;
        }
        Command::Eval { checkpoint, data, split, batch_size, out } => {
            if batch_size == 0 {
                return Err(CliError::Usage("--batch-size must be positive".into()));
            }
            let json = commands::cmd_eval(&checkpoint, &data, &split, batch_size)?;
            println!("{json}");
            if let Some(p) = out {
                std::fs::write(&p, json).map_err(|e| CliError::io(&p, e))?;
            }
        }
        Command::Ablate { config, out } => {
            let spec = load_spec(&config, cli.seed)?;
            let out = commands::output_dir(&spec, out.as_ref());
            commands::cmd_ablate(&spec, &out)?;
        }
        Command::Gradcheck { out, inject_fault } => {
            let fault = match inject_fault {
                None => None,
                Some(name) => Some(
                    OpKind::from_name(&name).ok_or_else(|| CliError::Usage(format!("unknown op {name:?}")))?,
                ),
            };
            commands::cmd_gradcheck(cli.seed.unwrap_or(0), fault, out.as_deref())?;
        }
        Command::GenData {
            kind,
            out,
            num_graphs,
            nodes,
            blocks,
            p_intra,
            p_inter,
            noise,
            min_nodes,
            max_nodes,
        } => {
            let kind = match kind {
                Kind::Sbm => GenKind::Sbm(SbmParams {
                    num_graphs: num_graphs.unwrap_or(500),
                    nodes_per_graph: nodes,
                    num_blocks: blocks,
                    p_intra,
                    p_inter,
                    feature_noise: noise,
                }),
                Kind::Regression => GenKind::Regression(RegressionParams {
                    num_graphs: num_graphs.unwrap_or(32),
                    min_nodes,
                    max_nodes,
                }),
            };
            commands::cmd_gen_data(&kind, cli.seed.unwrap_or(0), &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
