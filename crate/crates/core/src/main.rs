use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use corel::experiment::{cmd_report, ExperimentConfig, IntervalMode, Method, Run, RunOptions};
use corel::{Error, Result};

#[derive(Parser)]
#[command(
    name = "corel",
    version,
    about = "Relational conformal prediction for correlated time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Silence progress output.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the GPVAR benchmark into the run directory.
    Simulate(RunArgs),
    /// Train the base forecaster and cache calibration and test residuals.
    TrainForecaster(RunArgs),
    /// Calibrate a CP method on cached residuals and evaluate it on the test split.
    CalibrateEvaluate(RunArgs),
    /// Rolling evaluation with node-embedding adaptation.
    AdaptEvaluate(RunArgs),
    /// Merge metric reports from several run directories.
    Report {
        /// Run directories to merge.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Miscoverage level, repeatable.
    #[arg(long = "alpha")]
    alphas: Vec<f64>,
    /// scp, nexcp, seqcp, cornn or corel.
    #[arg(long)]
    method: Option<String>,
    /// Fix the CoRel graph to the known adjacency.
    #[arg(long)]
    true_graph: bool,
    /// Width-minimizing asymmetric intervals.
    #[arg(long)]
    beta_intervals: bool,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse artifacts produced under the same configuration.
    #[arg(long)]
    resume: bool,
}

impl RunArgs {
    fn open(&self, quiet: bool) -> Result<Run> {
        let mut cfg = match &self.config {
            Some(p) if !p.exists() => {
                return Err(Error::Config(format!(
                    "config file {} not found",
                    p.display()
                )))
            }
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if !self.alphas.is_empty() {
            cfg.alphas = self.alphas.clone();
        }
        if let Some(m) = &self.method {
            cfg.method.name = m.parse::<Method>()?;
        }
        if self.true_graph {
            cfg.method.true_graph = true;
        }
        if self.beta_intervals {
            cfg.interval_mode = IntervalMode::Beta;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Run::new(
            cfg,
            RunOptions {
                resume: self.resume,
                verbose: !quiet,
            },
        )
    }
}

fn print_reports(reports: &[corel::intervals::MetricReport]) {
    println!("method,alpha,delta_cov,pi_width,winkler");
    for r in reports {
        println!(
            "{},{},{:.4},{:.4},{:.4}",
            r.method, r.alpha, r.delta_cov, r.pi_width, r.winkler
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    let q = cli.quiet;
    match cli.command {
        Command::Simulate(a) => {
            let p = a.open(q)?.simulate()?;
            println!("{}", p.display());
        }
        Command::TrainForecaster(a) => {
            let mut r = a.open(q)?;
            let m = r.train_forecaster()?;
            println!(
                "best epoch {} val MAE {:.5}",
                m.meta.best_epoch, m.meta.best_val_mae
            );
        }
        Command::CalibrateEvaluate(a) => print_reports(&a.open(q)?.calibrate_evaluate()?),
        Command::AdaptEvaluate(a) => {
            let pairs = a.open(q)?.adapt_evaluate()?;
            let flat: Vec<_> = pairs.into_iter().flat_map(|(a, f)| [f, a]).collect();
            print_reports(&flat);
        }
        Command::Report { runs, out } => {
            cmd_report(&runs, &out)?;
            print!("{}", std::fs::read_to_string(out.join("report.md"))?);
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
