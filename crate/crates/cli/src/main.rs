mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use caspr_core::metrics::Task;
use caspr_core::synthgen::Signal;
use caspr_core::Result;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use config::{parse_signal, parse_with, Common, RunConfig};
use output::{error_line, exit_code};

/// Self-supervised entity embeddings for timestamped activity logs.
#[derive(Debug, Parser)]
#[command(name = "caspr", version, args_override_self = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic log: data.csv, schema.json, labels.csv.
    Synth {
        #[arg(long)]
        entities: Option<usize>,
        /// trend_churn or none.
        #[arg(long, value_parser = parse_signal)]
        signal: Option<Signal>,
    },
    /// Fit vocabularies and normalization statistics: fitted.json.
    Fit,
    /// Pretrain a model: checkpoint.cspr and loss.csv.
    Pretrain {
        #[arg(long)]
        workers: Option<usize>,
        /// Continue from --checkpoint; --epochs is then the total.
        #[arg(long)]
        resume: bool,
    },
    /// Embed every entity with a checkpoint: embeddings.csv.
    Embed,
    /// Recency/frequency/monetary baseline features: rfm.csv.
    Rfm,
    /// Linear probe on a features CSV against labels: metrics.csv.
    Eval {
        #[arg(long)]
        features: Option<PathBuf>,
        /// binary or regression.
        #[arg(long, value_parser = parse_with::<Task>)]
        task: Option<Task>,
    },
    /// Rank items by dot product with entity embeddings: ranking.csv and
    /// ranking_metrics.csv.
    Rank {
        /// CSV with `entity,relevant`, relevant ids separated by `|`.
        #[arg(long)]
        relevance: Option<PathBuf>,
        /// Categorical column whose embedding table gives the item vectors.
        #[arg(long)]
        item_column: Option<String>,
    },
    /// Time pretraining epochs for each worker count: bench.csv.
    Bench {
        /// Comma-separated worker counts.
        #[arg(long, value_delimiter = ',')]
        workers: Vec<usize>,
    },
    /// fit, pretrain, embed and (with labels) eval against the RFM baseline.
    Pipeline {
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_parser = parse_with::<Task>)]
        task: Option<Task>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::resolve(&cli.common)?;
    match cli.command {
        Command::Synth { entities, signal } => {
            if let Some(n) = entities {
                cfg.synth.n_entities = n;
            }
            if let Some(s) = signal {
                cfg.synth.signal = s;
            }
            commands::synth(&cfg)
        }
        Command::Fit => commands::fit(&cfg).map(drop),
        Command::Pretrain { workers, resume } => commands::pretrain(&cfg, workers, resume),
        Command::Embed => commands::embed(&cfg),
        Command::Rfm => commands::rfm(&cfg),
        Command::Eval { features, task } => {
            cfg.features = features.or(cfg.features);
            cfg.task = task.or(cfg.task);
            print!("{}", commands::eval(&cfg)?.to_table());
            Ok(())
        }
        Command::Rank { relevance, item_column } => {
            cfg.relevance = relevance.or(cfg.relevance);
            cfg.item_column = item_column.or(cfg.item_column);
            print!("{}", commands::rank(&cfg)?.to_table());
            Ok(())
        }
        Command::Bench { workers } => {
            print!("{}", commands::bench(&cfg, &workers)?);
            Ok(())
        }
        Command::Pipeline { workers, task } => {
            cfg.task = task.or(cfg.task);
            for (name, report) in commands::pipeline(&cfg, workers)? {
                println!("[{name}]");
                print!("{}", report.to_table());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CASPR_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                e.exit();
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or_default();
            eprintln!("{}", error_line("UsageError", 2, first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", error_line(e.kind(), code, &e.to_string()));
            ExitCode::from(code as u8)
        }
    }
}
