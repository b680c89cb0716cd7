use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use ember_core::emulator::Mode;
use ember_pipeline::config::{parse_grid, Overrides, Settings};
use ember_pipeline::error::Result;
use ember_pipeline::{ablate, evaluate, parse_mode, train};

#[derive(Parser)]
#[command(name = "ember", version, about = "Physics-guided fire-spread emulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the scenario sweep and write the dataset.
    Generate(Common),
    /// Train one model on the training split.
    Train(Common),
    /// Score a trained model and the baselines on the test split.
    Evaluate(Common),
    /// Retrain with one physics term at a time.
    Ablate(Common),
    /// Serve predictions and simulations over HTTP.
    Serve(Common),
    /// Score the retrieval baselines only.
    Baseline(Common),
}

#[derive(Args)]
struct Common {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Work directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// cl, pgcl or pgcl+.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Grid size as MxP.
    #[arg(long, value_parser = |s: &str| parse_grid(s).map_err(|e| e.to_string()))]
    grid: Option<(usize, usize)>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    port: Option<u16>,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(path) => Settings::load(path)?,
            None => Settings::default(),
        };
        s.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            mode: self.mode,
            grid: self.grid,
            steps: self.steps,
            epochs: self.epochs,
            port: self.port,
        })?;
        Ok(s)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let s = c.settings()?;
            let m = ember_pipeline::generate(&s)?;
            println!(
                "generated {} runs ({} train, {} test) in {}",
                m.runs.len(),
                m.train.len(),
                m.test.len(),
                ember_pipeline::dataset::dataset_dir(&s.out).display()
            );
        }
        Command::Train(c) => {
            let s = c.settings()?;
            let out = ember_pipeline::train_mode(&s)?;
            print!("{}", train::log_text(&out.epochs));
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Evaluate(c) => {
            let s = c.settings()?;
            let report = ember_pipeline::evaluate_mode(&s)?;
            print!("{}", evaluate::report_text(&report));
            if let Some(t) = report.timing {
                println!("\ninference s/sequence: min {:.4} mean {:.4} max {:.4}", t.min, t.mean, t.max);
            }
        }
        Command::Ablate(c) => {
            let s = c.settings()?;
            let table = ember_pipeline::run_ablation(&s)?;
            print!("{}", ablate::table_text(&table));
        }
        Command::Baseline(c) => {
            let s = c.settings()?;
            let report = ember_pipeline::evaluate_baselines(&s)?;
            print!("{}", evaluate::report_text(&report));
        }
        Command::Serve(c) => {
            let s = c.settings()?;
            let state = Arc::new(ember_pipeline::serve_state(&s)?);
            let rt = tokio::runtime::Runtime::new().map_err(|source| ember_pipeline::PipelineError::Io {
                path: PathBuf::from("tokio runtime"),
                source,
            })?;
            rt.block_on(ember_pipeline::serve::serve(s.port, state))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
