use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynprune::commands;
use dynprune::{CliError, ExperimentConfig, Overrides};
use dynprune_core::trainer::{Optimizer, SelectionMode};
use dynprune_core::ScorerKind;

#[derive(Parser)]
#[command(name = "dynprune", version, about = "Dynamic data pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source/target CSVs of the generated recipe.
    GenData(Common),
    /// Pretrain (optional) and run one pruned finetuning run.
    Train(Common),
    /// Run the scorer x pruning ratio x beta x seed grid.
    Sweep(Common),
    /// Run the theory checks on instrumented SGD runs.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed (gen-data: data seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_ratio)]
    pruning_ratio: Option<f64>,
    #[arg(long, value_parser = parse_scorer)]
    scorer: Option<ScorerKind>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<SelectionMode>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<Optimizer>,
    /// Sweep worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let p: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&p) {
        Ok(p)
    } else {
        Err(format!("{p} is outside [0, 1)"))
    }
}

fn parse_scorer(s: &str) -> Result<ScorerKind, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<SelectionMode, String> {
    match s {
        "batch" => Ok(SelectionMode::Batch),
        "epoch" => Ok(SelectionMode::Epoch),
        _ => Err(format!("unknown mode `{s}` (expected batch or epoch)")),
    }
}

fn parse_optimizer(s: &str) -> Result<Optimizer, String> {
    match s {
        "sgd" => Ok(Optimizer::Sgd),
        "adam" => Ok(Optimizer::Adam),
        _ => Err(format!("unknown optimizer `{s}` (expected sgd or adam)")),
    }
}

impl Common {
    fn resolve(&self, data_seed: bool) -> Result<ExperimentConfig, CliError> {
        let overrides = Overrides {
            out: self.out.clone(),
            seed: if data_seed { None } else { self.seed },
            pruning_ratio: self.pruning_ratio,
            scorer: self.scorer,
            beta: self.beta,
            mode: self.mode,
            optimizer: self.optimizer,
            jobs: self.jobs,
        };
        let mut config = ExperimentConfig::resolve(self.config.as_deref(), &overrides)?;
        if let (true, Some(seed)) = (data_seed, self.seed) {
            match &mut config.data {
                dynprune::config::DataConfig::Generated(g) => g.seed = seed,
                dynprune::config::DataConfig::Csv(_) => {
                    return Err(CliError::Config(
                        "--seed with gen-data needs a generated recipe".into(),
                    ))
                }
            }
        }
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => {
            let config = c.resolve(true)?;
            let m = commands::gen_data(&config)?;
            println!(
                "wrote {} source and {} target rows to {}",
                m.source_rows,
                m.target_rows,
                config.out.display()
            );
        }
        Command::Train(c) => {
            let config = c.resolve(false)?;
            let m = commands::train(&config)?;
            println!(
                "{} p={} beta={} seed={}: val {} = {:.4}, test {:.4}, time efficiency {:.3}",
                m.scorer,
                m.pruning_ratio,
                m.beta,
                m.seed,
                m.metric,
                m.val_metric,
                m.test_metric,
                m.time_efficiency
            );
        }
        Command::Sweep(c) => {
            let config = c.resolve(false)?;
            let s = commands::sweep(&config)?;
            println!(
                "{} of {} cells completed; results in {}",
                s.completed,
                s.cells,
                config.out.display()
            );
        }
        Command::Verify(c) => {
            let config = c.resolve(false)?;
            let r = commands::verify(&config)?;
            for check in &r.checks {
                let status = if check.skipped { "SKIP" } else { "PASS" };
                println!("{status} {}", check.name);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
