use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use proder_cli::config::{parse_methods, RunConfig, Sizing};
use proder_cli::report::write_report;
use proder_cli::run::{check_summary, execute, write_atomic, RunOptions};
use proder_cli::sweep::{expand, parse_axis};
use proder_core::data::{generate_synthetic, write_csv};

#[derive(Parser)]
#[command(name = "proder", about = "Continual fault-classification experiments", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults reproduce the reference setup.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output root (overrides the config and $PRODER_OUT).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Quarter data, 15 epochs, quarter-size buffer.
    #[arg(long)]
    fast: bool,
    /// Read windows from this CSV instead of generating synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic dataset as CSV and print rows per (fault type, zone).
    Generate {
        #[command(flatten)]
        common: Common,
        /// Destination CSV.
        #[arg(long)]
        csv: PathBuf,
        /// Generator seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate (scenario, method, seed) cells, then write the report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated scenario ids (1-4).
        #[arg(long, value_delimiter = ',')]
        scenario: Vec<u8>,
        /// Comma-separated method names, or "all".
        #[arg(long)]
        method: Option<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        /// Reuse stored cells whose key matches instead of retraining them.
        #[arg(long)]
        resume: bool,
    },
    /// Rebuild the CSV tables and curves from stored results.
    Report {
        /// Output root holding runs/.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long, short)]
        config: Option<PathBuf>,
    },
    /// Run the cartesian product of strategy values, one output tree each.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Axis such as proder_beta=5,7.2 (repeatable).
        #[arg(long = "set", required = true)]
        axes: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        scenario: Vec<u8>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        resume: bool,
    },
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.output_dir = Some(o.clone());
    }
    if common.fast {
        cfg.sizing = Sizing::Fast;
    }
    if let Some(d) = &common.data {
        cfg.dataset.csv = Some(d.clone());
    }
    Ok(cfg)
}

fn select(cfg: &mut RunConfig, scenario: Vec<u8>, method: Option<String>, seed: Vec<u64>) -> anyhow::Result<()> {
    if !scenario.is_empty() {
        cfg.scenarios = scenario;
    }
    if let Some(m) = method {
        cfg.methods = parse_methods(&m)?;
    }
    if !seed.is_empty() {
        cfg.seeds = seed;
    }
    cfg.validate()
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn run_and_report(cfg: &RunConfig, resume: bool) -> anyhow::Result<()> {
    let summary = execute(cfg, RunOptions { resume }, &mut log)?;
    let out = cfg.output_dir();
    if !summary.written.is_empty() || !summary.reused.is_empty() {
        for f in write_report(&out)? {
            println!("{}", f.display());
        }
    }
    check_summary(&summary)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Generate { common, csv, seed } => {
            let mut cfg = load(&common)?;
            if let Some(s) = seed {
                cfg.dataset.generator.seed = s;
            }
            cfg.validate()?;
            let rows = generate_synthetic(&cfg.generator())?;
            let mut bytes = Vec::new();
            write_csv(&rows, &mut bytes)?;
            write_atomic(&csv, &bytes).with_context(|| format!("writing {}", csv.display()))?;
            let mut cells: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for r in &rows {
                *cells.entry((r.fault_type, r.zone)).or_default() += 1;
            }
            println!("fault_type,zone,rows");
            for ((f, z), n) in cells {
                println!("{f},{z},{n}");
            }
            eprintln!("{} rows written to {}", rows.len(), csv.display());
            Ok(())
        }
        Cmd::Run {
            common,
            scenario,
            method,
            seed,
            resume,
        } => {
            let mut cfg = load(&common)?;
            select(&mut cfg, scenario, method, seed)?;
            run_and_report(&cfg, resume)
        }
        Cmd::Report { out, config } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if out.is_some() {
                cfg.output_dir = out;
            }
            for f in write_report(&cfg.output_dir())? {
                println!("{}", f.display());
            }
            Ok(())
        }
        Cmd::Sweep {
            common,
            axes,
            seed,
            scenario,
            method,
            resume,
        } => {
            let mut cfg = load(&common)?;
            select(&mut cfg, scenario, method, seed)?;
            let axes = axes.iter().map(|a| parse_axis(a)).collect::<anyhow::Result<Vec<_>>>()?;
            let mut failed = Vec::new();
            for (name, cell) in expand(&cfg, &axes)? {
                eprintln!("== {name}");
                if let Err(e) = run_and_report(&cell, resume) {
                    eprintln!("{name}: {e:#}");
                    failed.push(name);
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                anyhow::bail!("sweep points failed: {}", failed.join("; "))
            }
        }
    }
}
