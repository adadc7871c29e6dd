use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gp_mpc::config::{ExperimentConfig, ModelKind, RunMode};
use gp_mpc::env::EnvKind;
use gp_mpc::rl::run_experiment;
use gp_mpc::verify::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "gp-mpc", version, about = "Probabilistic MPC with learned GP dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a learning experiment and write trials.jsonl, curve.csv and summary.txt.
    Run(RunArgs),
    /// Run one of the built-in oracle suites.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<EnvKind>,
    #[arg(long)]
    mode: Option<RunMode>,
    #[arg(long)]
    constrained: bool,
    /// Number of seeds (0..N).
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Parallel seeds; 0 uses all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Plan on the simulator instead of the learned model.
    #[arg(long)]
    true_dynamics: bool,
}

fn build_config(args: &RunArgs) -> Result<ExperimentConfig, String> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| e.to_string())?,
        None => {
            let env = args.env.ok_or("--env is required without --config")?;
            let mode = args.mode.ok_or("--mode is required without --config")?;
            ExperimentConfig::new(env, mode)
        }
    };
    if let Some(env) = args.env {
        cfg.env = env;
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if args.constrained {
        cfg.constrained = true;
    }
    if let Some(n) = args.seeds {
        cfg.seeds = (0..n).collect();
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(h) = args.horizon {
        cfg.horizon = Some(h);
    }
    if args.dt.is_some() {
        cfg.dt = args.dt;
    }
    if let Some(d) = &args.out_dir {
        cfg.output.dir = d.clone();
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if args.true_dynamics {
        cfg.model = ModelKind::TrueDynamics;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let cfg = match build_config(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Err(e) = result.write_outputs(&cfg.output.dir) {
        eprintln!("error: writing outputs: {e}");
        return ExitCode::FAILURE;
    }
    print!("{}", result.summary());
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Verify { suite } => {
            let report = run_suite(suite);
            print!("{report}");
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
