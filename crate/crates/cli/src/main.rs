use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfg_errsim::bench::{self, BenchCase};
use mfg_errsim::{load_config, run_scenario, ConfigError, Overrides};

const OK: u8 = 0;
const INVALID: u8 = 1;
const FAILED: u8 = 2;
const THREADS_VAR: &str = "MFG_ERRSIM_THREADS";

#[derive(Parser)]
#[command(name = "mfg-errsim", version, about = "Mean field games under erroneous initial information")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write CSVs, a plot script and a manifest.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Grid steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Check a scenario config without running it.
    Validate { config: PathBuf },
    /// Time the evolve pipeline over several sizes.
    Bench {
        /// Comma-separated NxSTEPS cases.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<BenchCase>>,
        #[arg(long, default_value_t = bench::MIN_REPS)]
        reps: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("{THREADS_VAR} must be a positive integer, got '{raw}'"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn report_config_error(e: &ConfigError) -> ExitCode {
    match e {
        ConfigError::Io { .. } => eprintln!("error: {e}"),
        ConfigError::Invalid(fields) => {
            eprintln!("error: invalid config");
            for f in fields {
                eprintln!("  {f}");
            }
        }
    }
    ExitCode::from(INVALID)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { INVALID } else { OK });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(INVALID);
    }
    match cli.command {
        Command::Validate { config } => match load_config(&config, &Overrides::default()) {
            Ok(cfg) => {
                println!("ok: mode {} with N = {}, {} steps, seed {} (hash {})", cfg.mode, cfg.n_agents, cfg.steps, cfg.seed, cfg.hash());
                ExitCode::from(OK)
            }
            Err(e) => report_config_error(&e),
        },
        Command::Run { config, out, seed, steps } => {
            let cfg = match load_config(&config, &Overrides { seed, steps, output_dir: out }) {
                Ok(c) => c,
                Err(e) => return report_config_error(&e),
            };
            match run_scenario(&cfg) {
                Ok(m) => {
                    println!("wrote {} files to {}", m.files.len() + 1, cfg.output_dir.display());
                    ExitCode::from(OK)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(FAILED)
                }
            }
        }
        Command::Bench { sizes, reps, seed, out } => {
            let cases = sizes.unwrap_or_else(|| bench::DEFAULT_SIZES.to_vec());
            let reports = match bench::bench_suite(&cases, reps, seed) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(FAILED);
                }
            };
            println!("{:>10} {:>6} {:>12} {:>12} {:>16}", "case", "reps", "median_s", "p95_s", "agent-steps/s");
            for r in &reports {
                println!("{:>10} {:>6} {:>12.4} {:>12.4} {:>16.3e}", r.case.to_string(), r.reps, r.median_s, r.p95_s, r.throughput);
            }
            for c in bench::scaling_checks(&reports) {
                println!("{} {} = {:.3} (limit {:.3})", if c.ok() { "ok  " } else { "SLOW" }, c.description, c.ratio, c.limit);
            }
            if let Some(path) = out {
                if let Err(e) = std::fs::write(&path, bench::report_table(&reports).to_csv()) {
                    eprintln!("error: cannot write {}: {e}", path.display());
                    return ExitCode::from(FAILED);
                }
            }
            ExitCode::from(OK)
        }
    }
}
