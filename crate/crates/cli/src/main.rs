use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sppm_core::experiments::verify::{verify, Hooks, Level};
use sppm_core::experiments::{run_experiment, sweep_experiment, ExperimentConfig, SEED_ENV};
use sppm_core::SweepResult;

/// Federated stochastic proximal point simulator.
#[derive(Parser)]
#[command(name = "sppm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured algorithm once per seed and write trajectory CSVs.
    Run {
        /// Experiment config, or a manifest.json from an earlier run.
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Sweep (gamma, K) and report rounds and communication cost.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Self-check the sampling constants, solvers and bounds.
    Verify {
        #[arg(long, default_value = "quick")]
        level: Level,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_OTHER: u8 = 1;

fn jobs(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

fn fail(err: &sppm_core::Error) -> ExitCode {
    eprintln!("error: {err}");
    let code = if err.is_config() {
        EXIT_CONFIG
    } else if err.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_OTHER
    };
    ExitCode::from(code)
}

fn load(path: &PathBuf) -> Result<(ExperimentConfig, Vec<u64>), sppm_core::Error> {
    let cfg = ExperimentConfig::load(path)?;
    let env = std::env::var(SEED_ENV).ok();
    if env.is_some() {
        log::info!("{SEED_ENV} overrides the configured seeds");
    }
    let seeds = cfg.effective_seeds(env.as_deref())?;
    log::info!(
        "config {} (hash {}), {} seed(s), output {}",
        path.display(),
        &cfg.hash()[..12],
        seeds.len(),
        cfg.output_dir.display()
    );
    Ok((cfg, seeds))
}

fn print_optima(label: &str, result: &SweepResult) {
    println!("{label} (c1={}, c2={}):", result.params.c1, result.params.c2);
    for o in &result.optima {
        let reduction = o
            .reduction_vs_baseline_pct
            .map_or("n/a".to_string(), |r| format!("{r:.1}%"));
        println!(
            "  gamma={:<10} K*={:<3} T_eps={:<5} cost={:<10} vs LocalGD: {reduction}",
            o.gamma, o.k, o.t_eps, o.total_cost
        );
    }
    match &result.baseline_optimum {
        Some(b) => println!(
            "  LocalGD best: K={} T_eps={} cost={}",
            b.k,
            b.t_eps.map_or("-".into(), |t| t.to_string()),
            b.total_cost.map_or("-".into(), |c| c.to_string())
        ),
        None => println!("  LocalGD: no baseline configured"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, jobs: j } => {
            let (cfg, seeds) = match load(&config) {
                Ok(v) => v,
                Err(e) => return fail(&e),
            };
            log::info!("running {} seed(s) on {} thread(s)", seeds.len(), jobs(j));
            match run_experiment(&cfg, &seeds, jobs(j)) {
                Ok(manifest) => {
                    println!(
                        "wrote {} artifacts to {} in {:.2}s",
                        manifest.artifacts.len(),
                        cfg.output_dir.display(),
                        manifest.wall_clock_secs
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Sweep { config, jobs: j } => {
            let (cfg, seeds) = match load(&config) {
                Ok(v) => v,
                Err(e) => return fail(&e),
            };
            log::info!("sweeping on {} thread(s)", jobs(j));
            match sweep_experiment(&cfg, &seeds, jobs(j)) {
                Ok((summary, manifest)) => {
                    print_optima("flat cost", &summary.flat);
                    print_optima("hierarchical cost", &summary.hierarchical);
                    println!(
                        "wrote {} artifacts to {} in {:.1}s",
                        manifest.artifacts.len(),
                        cfg.output_dir.display(),
                        manifest.wall_clock_secs
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Verify { level } => {
            let report = verify(level, &Hooks::default());
            print!("{report}");
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_OTHER)
            }
        }
    }
}
