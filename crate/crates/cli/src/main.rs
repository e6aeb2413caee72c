use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use duo_core::config::{EmbeddingSource, RunConfig, TaskKind};
use duo_core::error::Error;
use duo_core::harness;

/// Dual-embedding attention models: train, translate, and verify.
#[derive(Parser)]
#[command(name = "duo", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration file ("key = value" with [model]/[data]/[train]/[ablation] sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dual-embedding classifier; writes history.csv and best.ckpt.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
    },
    /// Train the two-stream translator; writes history.csv and best.ckpt.
    TrainTranslator {
        #[command(flatten)]
        common: Common,
    },
    /// Greedy-translate a file line by line with a trained checkpoint.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Finite-difference verification of every operation and both models.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Parameter-count report: formulas vs live tallies, projections per site.
    ParamReport {
        #[command(flatten)]
        common: Common,
    },
    /// Train every unordered couple of embedding sources; writes couple_grid.csv.
    CoupleGrid {
        #[command(flatten)]
        common: Common,
        /// Embedding sources: file paths or learned:<dim> specs (at least two).
        sources: Vec<String>,
    },
    /// Run the cumulative five-rung feature ladder; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the two-stream model and a parameter-matched single-stream
    /// baseline under identical budgets; writes convergence.csv.
    Convergence {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::parse_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::TrainClassifier { common } => {
            let mut cfg = load_config(&common)?;
            cfg.task = TaskKind::Classify;
            print!("{cfg}");
            let art = harness::cmd_train_classifier(&cfg, &common.out)?;
            println!("{}", art.summary());
            println!("wrote {} and {}", art.history_path.display(), art.checkpoint_path.display());
            Ok(())
        }
        Command::TrainTranslator { common } => {
            let mut cfg = load_config(&common)?;
            cfg.task = TaskKind::Translate;
            print!("{cfg}");
            let art = harness::cmd_train_translator(&cfg, &common.out)?;
            println!("{}", art.summary());
            println!("wrote {} and {}", art.history_path.display(), art.checkpoint_path.display());
            Ok(())
        }
        Command::Translate { common, checkpoint, input, output } => {
            let cfg = load_config(&common)?;
            let lines = harness::cmd_translate(&cfg, &checkpoint, &input, &output)?;
            println!("translated {lines} line(s) into {}", output.display());
            Ok(())
        }
        Command::GradCheck { common } => {
            let _ = load_config(&common)?; // double precision is forced; config is not needed
            let report = harness::cmd_grad_check()?;
            print!("{}", report.render());
            if report.passed() {
                Ok(())
            } else {
                Err(Error::Contract("gradient check failed".to_string()))
            }
        }
        Command::ParamReport { common } => {
            let cfg = load_config(&common)?;
            let report = harness::cmd_param_report(&cfg)?;
            print!("{}", report.render());
            if report.consistent() {
                Ok(())
            } else {
                Err(Error::Contract("parameter tally mismatch".to_string()))
            }
        }
        Command::CoupleGrid { common, sources } => {
            let cfg = load_config(&common)?;
            let sources = sources
                .iter()
                .map(|s| EmbeddingSource::parse(s))
                .collect::<Result<Vec<_>, _>>()?;
            let grid = harness::cmd_couple_grid(&cfg, &sources)?;
            let path = common.out.join("couple_grid.csv");
            harness::write_text(&path, &grid.csv)?;
            print!("{}", grid.csv);
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Ablate { common } => {
            let cfg = load_config(&common)?;
            let result = harness::cmd_ablate(&cfg)?;
            let path = common.out.join("ablation.csv");
            harness::write_text(&path, &result.csv)?;
            print!("{}", result.csv);
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Convergence { common } => {
            let cfg = load_config(&common)?;
            let result = harness::run_convergence(&cfg, cfg.runs)?;
            let path = common.out.join("convergence.csv");
            harness::write_text(&path, &result.csv)?;
            println!("{}", result.summary());
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                // Usage and configuration problems exit 2; assertion and
                // validation failures exit 1.
                Error::Config { .. } | Error::Invalid(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
