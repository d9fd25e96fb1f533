use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pgflow_core::harness::{compare_table, render_plots, run_experiment, run_sweep, theory_summary, ExperimentConfig};
use pgflow_core::Result;

/// Flow-matching GFlowNets with plain and personalized meta-learning.
#[derive(Parser)]
#[command(name = "pgflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every configured algorithm for every seed.
    Run {
        config: PathBuf,
        /// Run directory (default: runs/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Render SVG charts from a run directory's metrics.
    Plot { run_dir: PathBuf },
    /// Print the theory diagnostics of a run directory.
    Theory { run_dir: PathBuf },
    /// Repeat a run for several values of one parameter.
    Sweep {
        config: PathBuf,
        /// Dotted key, e.g. `lambda` or `env.r0_max`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// L1 level used for the rounds-to-threshold report.
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Tabulate averaged reward and L1 across run directories.
    Compare {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

fn load(config: &Path, seeds: Option<Vec<u64>>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn configure_threads() {
    if let Some(n) = std::env::var("PGFLOW_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0) {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out, seeds } => {
            let cfg = load(&config, seeds)?;
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
            let summary = run_experiment(&cfg, &out)?;
            for (m, s) in &summary {
                println!("{m:<16} reward {:<14} L1 {}", s.avg_reward.display, s.l1_error.display);
            }
            println!("wrote {}", out.display());
        }
        Command::Plot { run_dir } => {
            for f in render_plots(&run_dir)? {
                println!("{}", f.display());
            }
        }
        Command::Theory { run_dir } => print!("{}", theory_summary(&run_dir)?),
        Command::Sweep { config, param, values, threshold, out, seeds } => {
            let cfg = load(&config, seeds)?;
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{}_sweep_{param}", cfg.name)));
            for p in run_sweep(&cfg, &param, &values, threshold, &out)? {
                let rtt: Vec<String> = p
                    .rounds_to_threshold
                    .iter()
                    .map(|(m, r)| format!("{m}={}", r.map(|t| t.to_string()).unwrap_or_else(|| "-".into())))
                    .collect();
                println!("{param}={}: rounds to L1<={threshold}: {}", p.value, rtt.join(" "));
            }
            println!("wrote {}", out.display());
        }
        Command::Compare { run_dirs } => print!("{}", compare_table(&run_dirs)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    configure_threads();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
