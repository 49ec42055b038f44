//! `mfchaos`: run validations, simulations and scans from a TOML config.
//!
//! Exit codes: 0 on success, 1 when validation fails (the report is still
//! written), 2 on any other error. Errors are also printed to stderr as a
//! single JSON object.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mfchaos::experiments::{
    self, coupled_series, lln_scan, longtime_scan, model_hash, oracle_scan, rate_scan_n, run_simulation,
    validate_model, write_gap_csv, write_gnuplot, write_json, write_results_csv, ExperimentConfig, ExperimentError,
    Manifest, Record,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "mfchaos", version, about = "Propagation-of-chaos experiments for mean-field particle systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check threshold conditions and spot-check declared constants.
    Validate(Common),
    /// Simulate one system (interacting or limit copies).
    Simulate(Common),
    /// Coupling gap over time for a single N.
    Couple {
        #[command(flatten)]
        common: Common,
        /// Particle count; defaults to the first entry of the N grid.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Coupling statistic against N with a log-log fit.
    #[command(name = "scan-n")]
    ScanN(Common),
    /// Long-time contraction scan with a plateau verdict.
    #[command(name = "scan-t")]
    ScanT(Common),
    /// Law-of-large-numbers gap against N.
    Lln(Common),
    /// Exact chaos curves of a linear Gaussian model.
    Oracle(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads: a positive count or `auto`.
    #[arg(long, default_value = "auto")]
    threads: Threads,
}

#[derive(Clone, Copy, Debug)]
enum Threads {
    Auto,
    Count(usize),
}

impl FromStr for Threads {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(Self::Count(k)),
            _ => Err(format!("expected a positive integer or `auto`, got `{s}`")),
        }
    }
}

enum Outcome {
    Done,
    ValidationFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::ValidationFailed) => ExitCode::from(1),
        Err(e) => {
            let kind = if e.is_runtime() { "runtime" } else { "input" };
            eprintln!("{}", json!({ "error": kind, "message": e.to_string() }));
            ExitCode::from(2)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Validate(_) => "validate",
        Command::Simulate(_) => "simulate",
        Command::Couple { .. } => "couple",
        Command::ScanN(_) => "scan-n",
        Command::ScanT(_) => "scan-t",
        Command::Lln(_) => "lln",
        Command::Oracle(_) => "oracle",
    }
}

fn run(cli: Cli) -> Result<Outcome, ExperimentError> {
    let name = command_name(&cli.command);
    let common = match &cli.command {
        Command::Validate(c)
        | Command::Simulate(c)
        | Command::ScanN(c)
        | Command::ScanT(c)
        | Command::Lln(c)
        | Command::Oracle(c)
        | Command::Couple { common: c, .. } => c,
    };
    if let Threads::Count(k) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    let out = common.out.as_path();
    let started = Instant::now();

    // Scans and simulations need a model that passes its own checks.
    let needs_model = !matches!(cli.command, Command::Lln(_) | Command::Oracle(_));
    if needs_model {
        let spot = cfg.spot_check.clone().unwrap_or_default();
        let report = validate_model(cfg.model()?, &spot)?;
        if !report.passed || matches!(cli.command, Command::Validate(_)) {
            write_json(&out.join("report.json"), &report)?;
            write_manifest(out, name, &cfg, started)?;
            println!("{}", serde_json::to_string(&report).unwrap_or_default());
            if !report.passed {
                eprintln!("{name}: model failed validation, see {}", out.join("report.json").display());
                return Ok(Outcome::ValidationFailed);
            }
            return Ok(Outcome::Done);
        }
    }

    let records: Vec<Record> = match &cli.command {
        Command::Validate(_) => unreachable!("handled above"),
        Command::Simulate(_) => {
            let sim = cfg
                .simulate
                .as_ref()
                .ok_or_else(|| ExperimentError::Config("missing [simulate] section".into()))?;
            let r = run_simulation(cfg.model()?, sim)?;
            write_json(&out.join("report.json"), &r)?;
            r.records()
        }
        Command::Couple { n, .. } => {
            let scan = cfg.scan()?;
            let n = n.unwrap_or(scan.n_grid[0]);
            let series = coupled_series(cfg.model()?, scan, n)?;
            let pairs: Vec<_> = series.iter().map(|p| (p.t, p.estimate)).collect();
            write_gap_csv(&out.join("gap.csv"), &pairs)?;
            write_json(&out.join("report.json"), &series)?;
            series.iter().map(|p| Record::from_estimate(p.t, &p.estimate)).collect()
        }
        Command::ScanN(_) => {
            let r = rate_scan_n(cfg.model()?, cfg.scan()?)?;
            write_json(&out.join("report.json"), &r)?;
            if let Some(f) = &r.fit {
                eprintln!("scan-n: slope {:.4} (R² {:.4})", f.slope, f.r_squared);
            }
            r.records()
        }
        Command::ScanT(_) => {
            let r = longtime_scan(cfg.model()?, cfg.scan()?)?;
            write_json(&out.join("report.json"), &r)?;
            eprintln!("scan-t: fitted rate {:?}, verdict {:?}", r.fitted_rate, r.verdict);
            r.records()
        }
        Command::Lln(_) => {
            let lln = cfg
                .lln
                .as_ref()
                .ok_or_else(|| ExperimentError::Config("missing [lln] section".into()))?;
            let r = lln_scan(lln)?;
            write_json(&out.join("report.json"), &r)?;
            r.records()
        }
        Command::Oracle(_) => {
            let o = cfg
                .oracle
                .as_ref()
                .ok_or_else(|| ExperimentError::Config("missing [oracle] section".into()))?;
            let r = oracle_scan(o)?;
            write_json(&out.join("report.json"), &r)?;
            r.records()
        }
    };
    write_results_csv(&out.join("results.csv"), &records)?;
    write_gnuplot(&out.join("results.dat"), &records)?;
    write_manifest(out, name, &cfg, started)?;
    eprintln!("{name}: {} rows in {:.1}s -> {}", records.len(), started.elapsed().as_secs_f64(), out.display());
    Ok(Outcome::Done)
}

fn write_manifest(out: &Path, command: &str, cfg: &ExperimentConfig, started: Instant) -> Result<(), ExperimentError> {
    let seed = cfg
        .scan
        .as_ref()
        .map(|s| s.seed)
        .or(cfg.simulate.as_ref().map(|s| s.seed))
        .or(cfg.lln.as_ref().map(|s| s.seed));
    let manifest = Manifest {
        command: command.into(),
        config: cfg.clone(),
        model_hash: cfg.model.as_ref().map(model_hash),
        library_version: experiments::LIBRARY_VERSION.into(),
        seed,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("manifest.json"), &manifest)
}
