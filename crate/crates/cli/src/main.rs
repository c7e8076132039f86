//! `qnet`: run quantum network scenarios and parameter sweeps from TOML files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qnet_core::engine::RunOptions;
use qnet_core::metrics::SummaryRow;
use qnet_core::sweep::SweepPlan;
use qnet_core::{run_scenario, run_sweep, Error, ScenarioConfig};

/// Exit status for an invalid or malformed scenario file.
const EXIT_CONFIG: u8 = 2;
/// Exit status for a runtime invariant violation.
const EXIT_PROTOCOL: u8 = 3;
/// Exit status when some sweep runs failed.
const EXIT_PARTIAL: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "qnet",
    version,
    about = "Packet-switched quantum network simulator"
)]
struct Cli {
    /// Print nothing but errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write its CSV bundle.
    Run {
        /// Scenario file (TOML).
        config: PathBuf,
        /// Override `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for the output bundle. Nothing is written if omitted.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Check memory bookkeeping after every event (slow).
        #[arg(long)]
        check_invariants: bool,
    },
    /// Run every point of the `[sweep]` grid for every seed.
    Sweep {
        /// Scenario file (TOML) with a `[sweep]` section.
        config: PathBuf,
        /// First seed of each point; overrides `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for per-run bundles and `aggregate.csv`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Worker threads (defaults to the number of cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check a scenario file and print the effective configuration.
    Validate {
        /// Scenario file (TOML).
        config: PathBuf,
    },
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parse(_) => EXIT_CONFIG,
        Error::Protocol { .. } => EXIT_PROTOCOL,
        Error::Io(_) | Error::Csv(_) => 1,
    }
}

fn report(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    if let Error::Protocol { trace, .. } = err {
        eprintln!("recent events (oldest first):");
        for line in trace {
            eprintln!("  {line}");
        }
    }
    ExitCode::from(exit_for(err))
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

fn print_summary_row(row: &SummaryRow) {
    if row.is_absent() {
        println!("{:<16} (no activity)", row.scope);
        return;
    }
    println!(
        "{:<16} delivered {:>8}  dropped {:>6}  loss {:>8}  F {:>8}  var {:>10}  rate {:>9.1}/s  skr {:>9}  util {:>9}",
        row.scope,
        row.deliveries,
        row.drops,
        fmt_opt(row.loss_fraction, 5),
        fmt_opt(row.mean_fidelity, 5),
        fmt_opt(row.fidelity_variance, 7),
        row.throughput,
        fmt_opt(row.skr, 1),
        fmt_opt(row.negativity_utility, 1),
    );
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, Error> {
    let cfg = ScenarioConfig::from_path(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn cmd_run(
    path: &Path,
    seed: Option<u64>,
    out_dir: Option<&Path>,
    check_invariants: bool,
    quiet: bool,
) -> Result<(), Error> {
    let cfg = load_config(path, seed)?;
    let options = RunOptions {
        check_invariants,
        record_trace: false,
    };
    let out = run_scenario(&cfg, out_dir, options)?;
    if !quiet {
        let c = out.conservation;
        println!(
            "seed {}  events {}  injected {}  delivered {}  dropped {}  in flight {}",
            out.seed, out.events_fired, c.injected, c.delivered, c.dropped, c.in_flight
        );
        print_summary_row(&out.summary.overall);
        for row in &out.summary.regimes {
            print_summary_row(row);
        }
        if let Some(dir) = out_dir {
            println!("bundle written to {}", dir.display());
        }
    }
    Ok(())
}

fn cmd_sweep(
    path: &Path,
    seed: Option<u64>,
    out_dir: Option<&Path>,
    quiet: bool,
) -> Result<bool, Error> {
    let text = std::fs::read_to_string(path)?;
    let text = match seed {
        Some(s) => {
            let mut doc: toml::Table = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            qnet_core::config::set_dotted(&mut doc, "run.seed", toml::Value::Integer(s as i64))?;
            toml::to_string(&doc).expect("table serializes")
        }
        None => text,
    };
    let plan = SweepPlan::from_toml_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        Error::Parse(p) => Error::Config(format!("{}: {p}", path.display())),
        other => other,
    })?;
    if !quiet {
        println!(
            "{} points x {} seeds = {} runs",
            plan.points.len(),
            plan.seeds.len(),
            plan.run_count()
        );
    }
    let outcome = run_sweep(&plan, out_dir)?;
    let mut all_ok = true;
    for p in &outcome.points {
        for (seed, msg) in &p.failures {
            all_ok = false;
            eprintln!("point {} seed {seed} failed: {msg}", p.point.index);
        }
    }
    if !quiet {
        for row in &outcome.aggregate {
            let params: Vec<String> = outcome
                .parameter_names
                .iter()
                .zip(&row.assignments)
                .map(|(n, v)| format!("{n}={v}"))
                .collect();
            println!(
                "point {:>3} [{}] ok {} failed {}  F {:.5} ± {:.5}  rate {:.1} ± {:.1}/s  skr {:.1}  util {:.1}",
                row.point,
                params.join(", "),
                row.runs_ok,
                row.runs_failed,
                row.fidelity.mean,
                row.fidelity.se,
                row.throughput.mean,
                row.throughput.se,
                row.skr.mean,
                row.negativity_utility.mean,
            );
        }
        if let Some(dir) = out_dir {
            println!(
                "aggregate written to {}",
                dir.join("aggregate.csv").display()
            );
        }
    }
    Ok(all_ok)
}

fn cmd_validate(path: &Path, quiet: bool) -> Result<(), Error> {
    let cfg = load_config(path, None)?;
    if let Some(sweep) = &cfg.sweep {
        if !sweep.parameters.is_empty() {
            let text = std::fs::read_to_string(path)?;
            SweepPlan::from_toml_str(&text)?;
        }
    }
    if !quiet {
        print!("{}", cfg.to_toml_string());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "error"
    } else {
        "warn"
    }))
    .init();

    let result = match &cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
            check_invariants,
        } => cmd_run(
            config,
            *seed,
            out_dir.as_deref(),
            *check_invariants,
            cli.quiet,
        )
        .map(|_| true),
        Command::Sweep {
            config,
            seed,
            out_dir,
            threads,
        } => {
            if let Some(n) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(*n)
                    .build_global()
                {
                    log::warn!("could not size the worker pool: {e}");
                }
            }
            cmd_sweep(config, *seed, out_dir.as_deref(), cli.quiet)
        }
        Command::Validate { config } => cmd_validate(config, cli.quiet).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_PARTIAL),
        Err(e) => report(&e),
    }
}
