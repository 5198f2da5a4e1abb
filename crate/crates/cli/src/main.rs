use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stochload::likelihood::EstimatorKind;
use stochload::model::ParamName;
use stochload_cli::{commands, exit_code, ExperimentConfig, Overrides};

/// Stochastic load model: synthetic data, likelihood scans and posterior sampling.
#[derive(Debug, Parser)]
#[command(name = "stochload", version)]
struct Cli {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Voltage scenario file (TOML with a, b, c, d, t_end).
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, short = 'o', global = true)]
    output: Option<PathBuf>,
    /// Measurement CSV to use instead of synthetic data.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct EstimatorArgs {
    /// Likelihood estimator: det, mc or pf.
    #[arg(long)]
    estimator: Option<EstimatorKind>,
    /// Particle count for pf.
    #[arg(long)]
    particles: Option<usize>,
    /// Trajectory count for mc.
    #[arg(long)]
    trajectories: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the truth trajectory and write a synthetic dataset.
    Simulate,
    /// Evaluate the likelihood along one parameter.
    Scan {
        #[command(flatten)]
        estimator: EstimatorArgs,
        #[arg(long)]
        param: Option<ParamName>,
        /// Comma-separated dip depths.
        #[arg(long, value_delimiter = ',')]
        dips: Option<Vec<f64>>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Draw posterior samples.
    Sample {
        #[command(flatten)]
        estimator: EstimatorArgs,
        #[arg(long)]
        walkers: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare the spread of the Monte Carlo and particle filter estimates.
    VarianceStudy,
    /// Summarize a chain, optionally comparing it with a second one.
    Analyze {
        /// Chain CSV (deterministic-likelihood chain when comparing).
        #[arg(long)]
        chain: PathBuf,
        /// Chain CSV sampled with a stochastic likelihood.
        #[arg(long)]
        stoch_chain: Option<PathBuf>,
    },
}

fn overrides(cli: &Cli) -> Overrides {
    let mut o = Overrides {
        seed: cli.seed,
        jobs: cli.jobs,
        output_dir: cli.output.clone(),
        scenario_file: cli.scenario.clone(),
        data_path: cli.data.clone(),
        ..Default::default()
    };
    let mut estimator = |e: &EstimatorArgs| {
        o.estimator = e.estimator;
        o.particles = e.particles;
        o.trajectories = e.trajectories;
    };
    match &cli.command {
        Command::Scan {
            estimator: e,
            param,
            dips,
            points,
        } => {
            estimator(e);
            o.scan_param = *param;
            o.dips = dips.clone();
            o.points = *points;
        }
        Command::Sample {
            estimator: e,
            walkers,
            steps,
        } => {
            estimator(e);
            o.walkers = *walkers;
            o.steps = *steps;
        }
        _ => {}
    }
    o
}

fn run(cli: &Cli) -> stochload::Result<serde_json::Value> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&overrides(cli))?;
    cfg.validate()?;
    // a second initialization only happens in tests; keep the first pool
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build_global();
    match &cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Scan { .. } => commands::scan(&cfg),
        Command::Sample { .. } => commands::sample(&cfg),
        Command::VarianceStudy => commands::variance_study(&cfg),
        Command::Analyze { chain, stoch_chain } => {
            commands::analyze(&cfg, chain, stoch_chain.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
