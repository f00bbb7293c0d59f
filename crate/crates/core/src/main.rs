//! Thin command-line shell over the library: experiment execution, the
//! finite-difference gradient check, the aggregation-rule oracle runner,
//! and report generation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedvln::harness;
use fedvln::report;
use fedvln::robust_agg::AggRule;

/// Exit code for invalid configuration or unusable input.
const EXIT_USAGE: u8 = 2;
/// Exit code for a runtime failure or a failed check.
const EXIT_FAILURE: u8 = 1;

#[derive(Parser)]
#[command(name = "fedvln", about = "Federated VLN backdoor-attack and defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario: one experiment per seed, each into OUT/seed-N.
    Run {
        /// Scenario name (see `configs/`) or path to a JSON config file.
        #[arg(long)]
        config: String,
        /// Master seed; repeat for multiple runs.
        #[arg(long = "seed", default_values_t = [1u64])]
        seeds: Vec<u64>,
        /// Output directory (default: runs/{scenario}).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dotted-path config override, e.g. `local.mix_weight=0.8`.
        #[arg(long = "override")]
        overrides: Vec<String>,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Negative control: corrupt one gradient coordinate per trial.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Run an aggregation rule and its brute-force reference on a JSON
    /// instance file and report the difference.
    Oracle {
        /// Rule name: fedavg, median, trimmed_mean, multi_krum, bulyan,
        /// fl_trust, pba, pba_input, pba_param.
        #[arg(long)]
        rule: String,
        /// Path to the instance JSON.
        #[arg(long)]
        instance: PathBuf,
    },
    /// Summarize finished run directories into CSV tables and curves.
    Report {
        /// Run directories (one per seed).
        dirs: Vec<PathBuf>,
        /// Output directory for summary.csv and curve files.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn init_logging() {
    let level = std::env::var("FEDVLN_LOG_LEVEL").unwrap_or_else(|_| "warn".into());
    env_logger::Builder::new().parse_filters(&level).init();
}

fn main() -> ExitCode {
    init_logging();
    match Cli::parse().command {
        Command::Run { config, seeds, out, overrides, jobs } => {
            cmd_run(&config, &seeds, out, &overrides, jobs)
        }
        Command::Gradcheck { seed, trials, corrupt } => cmd_gradcheck(seed, trials, corrupt),
        Command::Oracle { rule, instance } => cmd_oracle(&rule, &instance),
        Command::Report { dirs, out } => cmd_report(&dirs, &out),
    }
}

fn cmd_run(
    config: &str,
    seeds: &[u64],
    out: Option<PathBuf>,
    overrides: &[String],
    jobs: usize,
) -> ExitCode {
    let cfg = match harness::load_config(config).and_then(|c| harness::apply_overrides(&c, overrides))
    {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    let out = out.unwrap_or_else(|| harness::default_out_dir(&cfg.scenario));
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    match pool.install(|| harness::run_seeds(&cfg, seeds, &out)) {
        Ok(()) => {
            println!("{}: {} seed(s) -> {}", cfg.scenario, seeds.len(), out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn cmd_gradcheck(seed: u64, trials: usize, corrupt: bool) -> ExitCode {
    let segments = harness::gradcheck(seed, trials, corrupt);
    let mut ok = true;
    for seg in &segments {
        let pass = seg.max_rel_err <= harness::GRADCHECK_TOL;
        ok &= pass;
        println!(
            "{:<14} max_rel_err {:.3e} {}",
            seg.name,
            seg.max_rel_err,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILURE)
    }
}

fn parse_rule(name: &str) -> Option<AggRule> {
    serde_json::from_value(serde_json::Value::String(name.to_string())).ok()
}

fn cmd_oracle(rule: &str, instance: &PathBuf) -> ExitCode {
    let Some(rule) = parse_rule(rule) else {
        eprintln!("error: unknown rule `{rule}`");
        return ExitCode::from(EXIT_USAGE);
    };
    let inst = match harness::load_instance(instance) {
        Ok(inst) => inst,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match harness::oracle_check(rule, &inst) {
        Ok(rep) => {
            let sel = match rep.selection_matches {
                Some(true) => " selection: match",
                Some(false) => " selection: MISMATCH",
                None => "",
            };
            println!("{rule:?}: max_abs_diff {:.3e}{sel}", rep.max_abs_diff);
            if rep.max_abs_diff <= 1e-12 && rep.selection_matches != Some(false) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn cmd_report(dirs: &[PathBuf], out: &PathBuf) -> ExitCode {
    if dirs.is_empty() {
        eprintln!("error: no run directories given");
        return ExitCode::from(EXIT_USAGE);
    }
    let runs = match report::collect(dirs) {
        Ok(runs) => runs,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match report::write_report(out, &runs) {
        Ok(()) => {
            println!("report -> {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
