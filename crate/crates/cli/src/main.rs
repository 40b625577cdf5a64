use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use epg_core::acceptance::{run_acceptance, Scale};
use epg_core::env::certify_environment;
use epg_core::output::{
    first_difference, replicate_summary, run_summary, write_checkpoints, TraceWriter,
};
use epg_core::{build_environment, engine, Algorithm, Environment, EnvironmentConfig, RunOptions};

/// Simulator for epsilon-policy-gradient online pricing.
#[derive(Parser)]
#[command(name = "epg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seed and write trace.csv and summary.txt.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Seed (defaults to the config's base_seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Emit a row at every step instead of only at checkpoints.
        #[arg(long)]
        full_trace: bool,
    },
    /// Run independent seeds in parallel and write checkpoints.csv and summary.txt.
    Replicate {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Number of seeds (defaults to the config's run.seeds).
        #[arg(long)]
        seeds: Option<u64>,
        /// First seed (defaults to the config's base_seed).
        #[arg(long)]
        base_seed: Option<u64>,
        /// Worker threads (defaults to available parallelism).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print the certificate of derived constants; exit 1 if any item fails.
    Certify {
        /// Config file path or shipped environment name.
        config: String,
    },
    /// Run the acceptance suite.
    Accept {
        /// Reduced scale with widened tolerances.
        #[arg(long)]
        smoke: bool,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Compare two output files line by line; exit 1 at the first difference.
    Diff { left: PathBuf, right: PathBuf },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Config file path or shipped environment name (logit-2seg, gauss-1seg).
    config: String,
    /// epg, eps-greedy, pure-explore or oracle.
    #[arg(long, default_value = "epg")]
    algorithm: String,
    /// Override run.t_max; config checkpoints beyond it are dropped.
    #[arg(long)]
    t_max: Option<u64>,
    /// Override run.checkpoints, e.g. 1000,5000.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long, env = "EPG_OUTPUT_DIR", default_value = "epg-out")]
    out: PathBuf,
}

/// Distinguishes usage and config problems (exit 2) from experiment failures (exit 1).
enum Failure {
    Usage(anyhow::Error),
    Experiment(anyhow::Error),
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn experiment<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Experiment(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            exp,
            seed,
            full_trace,
        } => cmd_run(&exp, seed, full_trace),
        Command::Replicate {
            exp,
            seeds,
            base_seed,
            jobs,
        } => cmd_replicate(&exp, seeds, base_seed, jobs),
        Command::Certify { config } => cmd_certify(&config),
        Command::Accept { smoke, jobs } => Ok(cmd_accept(smoke, jobs)),
        Command::Diff { left, right } => cmd_diff(&left, &right),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Experiment(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn default_jobs(jobs: Option<usize>) -> usize {
    jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn prepare(exp: &ExperimentArgs) -> std::result::Result<(Environment, RunOptions), Failure> {
    let algorithm = Algorithm::parse(&exp.algorithm)
        .with_context(|| format!("unknown algorithm {:?}", exp.algorithm))
        .map_err(usage)?;
    let config = EnvironmentConfig::load(&exp.config).map_err(usage)?;
    let env = build_environment(&config).map_err(usage)?;
    let mut options = RunOptions::from_env(&env, algorithm);
    if let Some(t) = exp.t_max {
        options.t_max = t;
        options.checkpoints.retain(|&c| c <= t);
    }
    if let Some(c) = &exp.checkpoints {
        options.checkpoints = c.clone();
    }
    options.validate().map_err(usage)?;
    fs::create_dir_all(&exp.out)
        .with_context(|| format!("creating {}", exp.out.display()))
        .map_err(usage)?;
    Ok((env, options))
}

fn create(path: &Path) -> std::result::Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(experiment)
}

fn cmd_run(
    exp: &ExperimentArgs,
    seed: Option<u64>,
    full_trace: bool,
) -> std::result::Result<ExitCode, Failure> {
    let (env, mut options) = prepare(exp)?;
    options.full_trace = full_trace;
    let seed = seed.unwrap_or(env.config.run.base_seed);
    let csv_path = exp.out.join("trace.csv");
    let mut writer = TraceWriter::new(create(&csv_path)?, env.model.space()).map_err(experiment)?;
    let outcome = engine::run_with_sink(&env, &options, seed, &mut |r| Ok(writer.write(r)?));
    writer.finish().map_err(experiment)?;
    let (trace, error) = match outcome {
        Ok(trace) => (trace, None),
        Err(f) => (*f.trace, Some(format!("step {}: {}", f.t, f.error))),
    };
    let mut summary = run_summary(&env, &trace);
    if let Some(e) = &error {
        summary.add("error", e);
    }
    summary
        .write(create(&exp.out.join("summary.txt"))?)
        .map_err(experiment)?;
    print!("{}", summary.render());
    match error {
        None => Ok(ExitCode::SUCCESS),
        Some(e) => Err(experiment(anyhow::anyhow!(e))),
    }
}

fn cmd_replicate(
    exp: &ExperimentArgs,
    seeds: Option<u64>,
    base_seed: Option<u64>,
    jobs: Option<usize>,
) -> std::result::Result<ExitCode, Failure> {
    let (env, options) = prepare(exp)?;
    let n = seeds.unwrap_or(env.config.run.seeds);
    let base = base_seed.unwrap_or(env.config.run.base_seed);
    let seed_list: Vec<u64> = (0..n).map(|i| base + i).collect();
    let start = Instant::now();
    let result = engine::run_replications(&env, &options, &seed_list, default_jobs(jobs))
        .map_err(experiment)?;
    write_checkpoints(create(&exp.out.join("checkpoints.csv"))?, &result).map_err(experiment)?;
    let summary = replicate_summary(&env, &result);
    summary
        .write(create(&exp.out.join("summary.txt"))?)
        .map_err(experiment)?;
    print!("{}", summary.render());
    println!("wall_clock_seconds = {:.3}", start.elapsed().as_secs_f64());
    if result.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(experiment(anyhow::anyhow!(
            "{} replications failed",
            result.failures.len()
        )))
    }
}

fn cmd_certify(config: &str) -> std::result::Result<ExitCode, Failure> {
    let config = EnvironmentConfig::load(config).map_err(usage)?;
    let cert = certify_environment(&config).map_err(usage)?;
    print!("{cert}");
    Ok(if cert.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_accept(smoke: bool, jobs: Option<usize>) -> ExitCode {
    let scale = if smoke { Scale::Smoke } else { Scale::Full };
    let outcomes = run_acceptance(scale, default_jobs(jobs), &mut |o| {
        println!("{o}");
        let _ = std::io::stdout().flush();
    });
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn cmd_diff(left: &Path, right: &Path) -> std::result::Result<ExitCode, Failure> {
    let (a, b) = (open(left).map_err(usage)?, open(right).map_err(usage)?);
    match first_difference(a, b).map_err(experiment)? {
        None => {
            println!("identical");
            Ok(ExitCode::SUCCESS)
        }
        Some((line, l, r)) => {
            println!("line {line}:\n< {l}\n> {r}");
            Ok(ExitCode::from(1))
        }
    }
}
