use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fedcre::harness::{run_experiment, ExperimentSpec};
use fedcre::{verify, SchedulerKind, SystemConfig};

#[derive(Parser)]
#[command(name = "fedcre", version, about = "Wireless federated-learning scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run(RunArgs),
    /// Run the numerical bound and solver checks.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Sweep the penalty weight V with the CRE scheduler.
    SweepV {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated V values.
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1,10")]
        values: Vec<f64>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    scheduler: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Add per-client columns to the per-run CSVs.
    #[arg(long)]
    wide: bool,
}

fn parse_scheduler(name: &str) -> Option<SchedulerKind> {
    SchedulerKind::parse(name)
}

fn build_spec(args: &RunArgs) -> Result<ExperimentSpec> {
    let base = match &args.config {
        Some(path) => SystemConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => SystemConfig::reference(),
    };
    let base = base.with_raw(|r| {
        if let Some(s) = args.seed {
            r.seed = s;
        }
        if let Some(n) = args.rounds {
            r.learning.rounds = n;
        }
        if let Some(n) = args.replicates {
            r.experiment.replicates = n;
        }
    })?;
    let mut spec = ExperimentSpec::from_config(base, &args.out);
    spec.wide = args.wide;
    Ok(spec)
}

fn execute(spec: &ExperimentSpec) -> Result<()> {
    let report = run_experiment(spec)?;
    let m = &report.manifest;
    println!(
        "{} run(s) written to {} ({} failed)",
        report.runs.len(),
        spec.out_dir.display(),
        m.failures.len()
    );
    if !m.failures.is_empty() {
        anyhow::bail!("{} replicate(s) failed", m.failures.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    let scheduler_arg = match &cli.command {
        Command::Run(a) | Command::SweepV { run: a, .. } => a.scheduler.clone(),
        Command::Verify { .. } => None,
    };
    let scheduler = match scheduler_arg.as_deref().map(|s| (s, parse_scheduler(s))) {
        Some((name, None)) => {
            let valid: Vec<&str> = SchedulerKind::ALL.iter().map(|k| k.name()).collect();
            eprintln!("error: unknown scheduler '{name}'; valid names: {}", valid.join(", "));
            return ExitCode::from(2);
        }
        Some((_, kind)) => kind,
        None => None,
    };

    let result = match &cli.command {
        Command::Verify { seed } => {
            let checks = verify::run_suite(*seed);
            let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
            for c in &checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("{tag}  {:width$}  {}", c.name, c.detail);
            }
            if checks.iter().all(|c| c.passed) {
                Ok(())
            } else {
                Err(anyhow::anyhow!("verification failed"))
            }
        }
        Command::Run(args) => build_spec(args).and_then(|mut spec| {
            if let Some(k) = scheduler {
                spec.scheduler = k;
            }
            execute(&spec)
        }),
        Command::SweepV { run, values } => build_spec(run).and_then(|mut spec| {
            spec.scheduler = scheduler.unwrap_or(SchedulerKind::Cre);
            spec.v_values = values.clone();
            execute(&spec)
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
