use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dic_core::metrics;
use dic_core::protocol::{read_log, replay};
use dic_core::scenario::ScenarioConfig;
use dic_core::sim::{run_to_dir, RunSummary};
use dic_core::types::Strategy;

#[derive(Parser)]
#[command(name = "dic", version, about = "Dynamic inductive charging corridor simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Benchmark,
    Mpc,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Benchmark => Strategy::Benchmark,
            StrategyArg::Mpc => Strategy::Mpc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReplayStrategy {
    Mpc,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its outputs.
    Run {
        /// Scenario file (TOML or JSON). Defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the traffic x VUT x strategy grid and write a report over it.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        /// Traffic levels, vehicles per minute.
        #[arg(long, value_delimiter = ',', default_values_t = [5.0, 12.0, 20.0])]
        lambda: Vec<f64>,
        /// Period of the vehicles under test, s.
        #[arg(long, default_value_t = 60.0)]
        vut_period: f64,
        /// Runs executed at once. Defaults to the number of CPUs.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Recompute the MPC decisions of a round log and compare them.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum, default_value = "mpc")]
        strategy: ReplayStrategy,
        /// Print one line per round.
        #[arg(long)]
        verbose: bool,
    },
    /// Compute fulfillment and power tables from finished run directories.
    Report {
        #[arg(long, default_value = "report")]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Print the default scenario as TOML.
    Defaults,
}

fn load_config(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => Ok(ScenarioConfig::load(p)?),
        None => Ok(ScenarioConfig::default()),
    }
}

fn run_one(cfg: &ScenarioConfig, out: &Path) -> Result<RunSummary> {
    let scenario = cfg.build()?;
    let result = run_to_dir(&scenario, out).with_context(|| format!("run into {}", out.display()))?;
    Ok(result.summary())
}

fn sweep_label(lambda: f64, vut: bool, strategy: Strategy) -> String {
    format!("l{lambda}-{}-{strategy}", if vut { "vut" } else { "novut" })
}

fn sweep(base: ScenarioConfig, out: &Path, lambdas: &[f64], vut_period: f64, jobs: usize) -> Result<()> {
    let mut grid = Vec::new();
    for &lambda in lambdas {
        for vut in [false, true] {
            for strategy in [Strategy::Benchmark, Strategy::Mpc] {
                let mut cfg = base.clone();
                cfg.demand.lambda_vpm = lambda;
                cfg.demand.vut_period = vut.then_some(vut_period);
                cfg.sim.strategy = strategy;
                grid.push((out.join(sweep_label(lambda, vut, strategy)), cfg));
            }
        }
    }
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, grid.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((dir, cfg)) = grid.get(i) else { break };
                match run_one(cfg, dir) {
                    Ok(s) => eprintln!(
                        "{}: delivered {:.0} of {:.0} kW requested, {} measured exits",
                        dir.display(),
                        s.mean_delivered_kw,
                        s.mean_requested_kw,
                        s.measured_exits
                    ),
                    Err(e) => failures.lock().expect("no panics while held").push(format!("{}: {e:#}", dir.display())),
                }
            });
        }
    });
    let failures = failures.into_inner().expect("threads joined");
    if !failures.is_empty() {
        bail!("{} run(s) failed:\n{}", failures.len(), failures.join("\n"));
    }
    let dirs: Vec<&Path> = grid.iter().map(|(d, _)| d.as_path()).collect();
    let summary = metrics::report(&dirs, &out.join("report"))?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { config, seed, strategy, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(seed) = seed {
                cfg.demand.seed = seed;
            }
            if let Some(s) = strategy {
                cfg.sim.strategy = s.into();
            }
            let summary = run_one(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Sweep { config, seed, out, lambda, vut_period, jobs } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(seed) = seed {
                cfg.demand.seed = seed;
            }
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            sweep(cfg, &out, &lambda, vut_period, jobs)?;
        }
        Command::Replay { log, strategy: ReplayStrategy::Mpc, verbose } => {
            let file = read_log(&log)?;
            let report = replay(&file)?;
            if verbose {
                for r in &report.rounds {
                    println!(
                        "t={} vehicles={} max_pass_diff_kw={:e} identical={}",
                        r.timestamp, r.vehicles, r.max_pass_diff_kw, r.identical
                    );
                }
            }
            let logged = report.logged_strategy.map_or_else(|| "none".to_string(), |s| s.to_string());
            println!(
                "rounds={} logged_strategy={logged} max_pass_diff_kw={:e} identical={}",
                report.rounds.len(),
                report.max_pass_diff_kw(),
                report.identical()
            );
            if report.logged_strategy == Some(Strategy::Mpc) && !report.identical() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report { out, runs } => {
            let dirs: Vec<&Path> = runs.iter().map(|d| d.as_path()).collect();
            let summary = metrics::report(&dirs, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Defaults => {
            print!("{}", toml::to_string(&ScenarioConfig::default())?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
