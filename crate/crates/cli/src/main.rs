use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use erl_core::harness::{run_experiment, HarnessError, RunConfig};
use erl_core::metrics::{export, MetricsError, DEFAULT_SMOOTHING_WINDOW};
use erl_core::propcheck::{verify_proposition_seeded, PropError, IDENTITY_TOLERANCE};

#[derive(Parser)]
#[command(name = "erl", version, about = "Evolutionary RL training, verification and export")]
struct Cli {
    /// Overrides the output directory of every command.
    #[arg(long, global = true, env = "ERL_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every requested seed of a configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Seed range, `a..b` (exclusive) or `a..=b`.
        #[arg(long, value_parser = parse_seed_range)]
        seeds: Option<SeedRange>,
    },
    /// Check the mixed-distribution gradient identity on random instances.
    VerifyProp {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Residual table path; defaults to `<output dir>/verify_prop.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write CSV tables and a manifest for a run directory.
    Export {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SMOOTHING_WINDOW)]
        window: usize,
    },
}

#[derive(Debug, Clone)]
struct SeedRange(Vec<u64>);

fn parse_seed_range(s: &str) -> Result<SeedRange, String> {
    let (a, b, inclusive) = if let Some((a, b)) = s.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = s.split_once("..") {
        (a, b, false)
    } else {
        return Err(format!("expected `a..b` or `a..=b`, got `{s}`"));
    };
    let a: u64 = a.trim().parse().map_err(|_| format!("bad range start `{a}`"))?;
    let b: u64 = b.trim().parse().map_err(|_| format!("bad range end `{b}`"))?;
    let seeds: Vec<u64> = if inclusive { (a..=b).collect() } else { (a..b).collect() };
    if seeds.is_empty() {
        return Err(format!("seed range `{s}` is empty"));
    }
    Ok(SeedRange(seeds))
}

/// The identity check ran but some instance exceeded the tolerance.
#[derive(Debug)]
struct VerifyFailed;

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "identity residual above tolerance")
    }
}

impl std::error::Error for VerifyFailed {}

fn category(err: &anyhow::Error) -> (&'static str, u8) {
    if let Some(e) = err.downcast_ref::<HarnessError>() {
        let cat = e.category();
        return (cat, if cat == "config" { 2 } else { 1 });
    }
    if err.downcast_ref::<MetricsError>().is_some() {
        return ("metrics", 1);
    }
    if err.downcast_ref::<PropError>().is_some() {
        return ("verification", 1);
    }
    if err.downcast_ref::<VerifyFailed>().is_some() {
        return ("verification_failed", 3);
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return ("io", 1);
    }
    ("internal", 1)
}

fn train(cli_out: Option<PathBuf>, config: PathBuf, seed: Option<u64>, seeds: Option<SeedRange>) -> Result<()> {
    let mut cfg = RunConfig::load(&config)?;
    if let Some(dir) = cli_out {
        cfg.output_dir = dir;
    }
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    } else if let Some(SeedRange(s)) = seeds {
        cfg.seeds = s;
    }
    let records = run_experiment(&cfg)?;
    for r in &records {
        let last = r.rows.iter().rev().find_map(|row| row.target_eval_return);
        let steps = r.rows.last().map_or(0, |row| row.training_steps);
        match last {
            Some(ret) => println!("seed {}: {} iterations, {steps} training steps, last eval {ret:.3}", r.seed, r.rows.len()),
            None => println!("seed {}: {} iterations, {steps} training steps", r.seed, r.rows.len()),
        }
    }
    println!("run written to {}", cfg.output_dir.display());
    Ok(())
}

fn verify_prop(cli_out: Option<PathBuf>, instances: usize, seed: u64, csv: Option<PathBuf>) -> Result<()> {
    let report = verify_proposition_seeded(instances, seed)?;
    let path = csv.unwrap_or_else(|| cli_out.unwrap_or_else(|| PathBuf::from("runs")).join("verify_prop.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    report.write_csv(BufWriter::new(file))?;
    let failed = report.rows.iter().filter(|r| !r.passed).count();
    println!(
        "{} {instances} instances, max relative residual {:.3e} (tolerance {IDENTITY_TOLERANCE:e}), {failed} failed",
        if report.passed() { "PASS" } else { "FAIL" },
        report.max_relative
    );
    println!("residuals written to {}", path.display());
    if !report.passed() {
        return Err(VerifyFailed.into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, seeds } => train(cli.output_dir, config, seed, seeds),
        Command::VerifyProp { instances, seed, csv } => verify_prop(cli.output_dir, instances, seed, csv),
        Command::Export { run_dir, window } => {
            let manifest = export(&run_dir, window)?;
            println!("exported {} files for seeds {:?}", manifest.files.len(), manifest.seeds);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (cat, code) = category(&err);
            eprintln!("error[{cat}]: {err:#}");
            ExitCode::from(code)
        }
    }
}
