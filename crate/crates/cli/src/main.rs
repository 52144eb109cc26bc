#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cnode::training::Scale;
use cnode::Error;

use config::{ModelEntry, Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "cnode",
    version,
    about = "Constrained neural state-space identification of a building thermal plant"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the plant and write the train/val/test partitions.
    Simulate(Common),
    /// Run the training sweep and write checkpoints and the results table.
    Train(Common),
    /// Export tables, eigenvalues, traces and figures for a trained run.
    Report(Common),
    /// Run the gradient, stability and eigensolver self-tests.
    Check(Common),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads for the sweep [default: available cores].
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
    /// Epoch/restart/learning-rate preset.
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
    /// Same as `--scale paper`.
    #[arg(long, conflicts_with = "scale")]
    paper_scale: bool,
    /// Output root; the run writes under `<out>/<run id>`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "ID")]
    run_id: Option<String>,
    /// Comma-separated models, e.g. `gray,cgray,srnn` or `ODE_B,cODE_W`.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Comma-separated prediction horizons.
    #[arg(long = "N", value_name = "N", value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    /// Comma-separated learning rates.
    #[arg(long, value_delimiter = ',')]
    lr: Option<Vec<f64>>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let models = self
            .variants
            .as_ref()
            .map(|v| v.iter().map(|t| ModelEntry::parse(t)).collect::<Result<Vec<_>, _>>())
            .transpose()?;
        let scale = match (self.scale, self.paper_scale) {
            (_, true) | (Some(ScaleArg::Paper), _) => Some(Scale::Paper),
            (Some(ScaleArg::Desk), _) => Some(Scale::Desk),
            (None, false) => None,
        };
        cfg.apply(Overrides {
            seed: self.seed,
            jobs: self.jobs,
            scale,
            out_dir: self.out.clone(),
            run_id: self.run_id.clone(),
            models,
            horizons: self.horizons.clone(),
            learning_rates: self.lr.clone(),
            restarts: self.restarts,
            epochs: self.epochs,
        });
        Ok(cfg)
    }
}

/// 1 usage, 2 data, 3 numeric.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => 1,
        Error::Numeric { .. }
        | Error::Divergence { .. }
        | Error::Convergence { .. }
        | Error::Contract(_) => 3,
        _ => 2,
    }
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Simulate(c) => {
            let cfg = c.resolve()?;
            for path in commands::simulate(&cfg)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let summary = commands::train(&cfg, std::io::stderr())?;
            println!(
                "trained {} cells ({} failed), skipped {} completed",
                summary.trained, summary.failed, summary.skipped
            );
            print!("{}", commands::format_best(&summary.best));
        }
        Command::Report(c) => {
            let cfg = c.resolve()?;
            let written = commands::report(&cfg)?;
            println!("wrote {} files under {}", written.len(), cfg.run_dir().display());
        }
        Command::Check(c) => {
            let cfg = c.resolve()?;
            let lines = commands::check(cfg.seed)?;
            let mut ok = true;
            for l in &lines {
                println!("{} {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
                ok &= l.passed;
            }
            if !ok {
                return Err(Error::Numeric {
                    context: "self-test".into(),
                    step: None,
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
