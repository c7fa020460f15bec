//! `bellwire`: solve, certify and audit decision circuits described in TOML.
//!
//! Exit status is 0 when every check passes, 1 when a check fails (the
//! failing names go to stderr) and 2 when the input cannot be processed.

mod commands;
mod doc;
mod examples;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use commands::{Method, DEFAULT_TRAJECTORIES};
use doc::Document;
use report::{Report, Tolerances};

/// Environment variable supplying the default seed.
const SEED_ENV: &str = "BELLWIRE_SEED";

#[derive(Parser)]
#[command(name = "bellwire", version, about = "Compositional Bellman circuits: solve, certify, audit")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Opts {
    /// Seed for every randomized step [default: $BELLWIRE_SEED, else 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Solver stopping tolerance.
    #[arg(long, global = true, default_value_t = 1e-10)]
    tol: f64,
    /// Slack added to certified bounds before comparison.
    #[arg(long, global = true, default_value_t = 1e-9)]
    slack: f64,
    /// Monte Carlo acceptance width in standard errors.
    #[arg(long, global = true, default_value_t = 4.0)]
    sigmas: f64,
    /// Monte Carlo trajectories per estimate.
    #[arg(long, global = true)]
    trajectories: Option<usize>,
    /// Worker threads for parallel audits; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Also write the report as JSON to this file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print wall-clock time to stderr.
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fixed point of a closed circuit or a named transformer.
    Solve {
        file: PathBuf,
        /// Comma-separated methods to run and cross-check.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "linear,vi")]
        method: Vec<Method>,
    },
    /// Certificate and congruence audit of a one-hole context with two fillers.
    Certify { file: PathBuf },
    /// Least fixed points, pre-fixed point checks and contract lifting.
    Contract { file: PathBuf },
    /// Exact and approximate homomorphism audits.
    Abstraction { file: PathBuf },
    /// Belief-tree value against online filtering.
    Belief { file: PathBuf },
    /// Exact off-policy identities by prefix enumeration.
    Ope { file: PathBuf },
    /// Fixed-point and iterate tracking along a drifting sequence.
    Track { file: PathBuf },
    /// Run a built-in scenario.
    Example {
        name: Option<String>,
        /// List the available scenarios.
        #[arg(long)]
        list: bool,
    },
}

fn seed(opts: &Opts) -> Result<u64> {
    if let Some(s) = opts.seed {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v} is not an unsigned integer")),
        Err(_) => Ok(0),
    }
}

fn load(path: &PathBuf) -> Result<(Vec<u8>, Document)> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let text = std::str::from_utf8(&bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
    let doc = Document::parse(text).with_context(|| format!("parse error in {}", path.display()))?;
    Ok((bytes, doc))
}

fn run(cli: &Cli) -> Result<Option<Report>> {
    let o = &cli.opts;
    let tolerances = Tolerances {
        solver: o.tol,
        slack: o.slack,
        mc_sigmas: o.sigmas,
    };
    let seed = seed(o)?;
    let (name, file) = match &cli.cmd {
        Cmd::Solve { file, .. } => ("solve", file),
        Cmd::Certify { file } => ("certify", file),
        Cmd::Contract { file } => ("contract", file),
        Cmd::Abstraction { file } => ("abstraction", file),
        Cmd::Belief { file } => ("belief", file),
        Cmd::Ope { file } => ("ope", file),
        Cmd::Track { file } => ("track", file),
        Cmd::Example { name, list } => {
            if *list || name.is_none() {
                for n in examples::NAMES {
                    println!("{n}");
                }
                return Ok(None);
            }
            let name = name.as_deref().expect("checked above");
            let mut rep = Report::new("example", &format!("example:{name}"), name.as_bytes(), seed, tolerances);
            examples::run(name, &mut rep, o.trajectories)?;
            return Ok(Some(rep));
        }
    };
    let (bytes, doc) = load(file)?;
    let mut rep = Report::new(name, &file.display().to_string(), &bytes, seed, tolerances);
    let at = || format!("{}", file.display());
    match &cli.cmd {
        Cmd::Solve { method, .. } => {
            commands::solve(&doc, &mut rep, method, o.trajectories.unwrap_or(DEFAULT_TRAJECTORIES)).with_context(at)?
        }
        Cmd::Certify { .. } => commands::certify(&doc, &mut rep).with_context(at)?,
        Cmd::Contract { .. } => commands::contract(&doc, &mut rep).with_context(at)?,
        Cmd::Abstraction { .. } => commands::abstraction(&doc, &mut rep).with_context(at)?,
        Cmd::Belief { .. } => commands::belief(&doc, &mut rep, o.trajectories).with_context(at)?,
        Cmd::Ope { .. } => commands::ope(&doc, &mut rep).with_context(at)?,
        Cmd::Track { .. } => commands::track(&doc, &mut rep).with_context(at)?,
        Cmd::Example { .. } => unreachable!("handled above"),
    }
    Ok(Some(rep))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.opts.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    let start = Instant::now();
    let result = run(&cli);
    if cli.opts.timing {
        eprintln!("elapsed: {:.3} s", start.elapsed().as_secs_f64());
    }
    let rep = match result {
        Ok(Some(rep)) => rep,
        Ok(None) => return ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    print!("{}", rep.to_text());
    if let Some(path) = &cli.opts.out {
        if let Err(e) = std::fs::write(path, rep.to_json()) {
            eprintln!("error: cannot write {}: {e}", path.display());
            return ExitCode::from(2);
        }
    }
    if rep.pass {
        ExitCode::SUCCESS
    } else {
        eprintln!("failing checks: {}", rep.failing().join(", "));
        ExitCode::from(1)
    }
}
