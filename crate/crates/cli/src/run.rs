//! Executes (scenario × seed × method) cells and persists one JSON per cell.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use proder_core::data::{
    build_scenario, dataset_hash, generate_synthetic, load_csv, DatasetSplit, SampleRow,
};
use proder_core::eval::{run_cell, RunResult};
use proder_core::strategies::Method;
use proder_core::Error;
use serde_json::json;

use crate::config::RunConfig;

pub struct Dataset {
    pub rows: Vec<SampleRow>,
    pub split: DatasetSplit,
    pub hash: String,
    /// Enough to rebuild the data: source, generator and split settings.
    pub echo: serde_json::Value,
}

pub fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let (rows, source) = match &cfg.dataset.csv {
        Some(path) => (
            load_csv(path).with_context(|| format!("loading {}", path.display()))?,
            json!({ "csv": path }),
        ),
        None => {
            let g = cfg.generator();
            (generate_synthetic(&g)?, json!({ "generator": g }))
        }
    };
    let split = DatasetSplit::build(&rows, cfg.dataset.train_fraction, cfg.dataset.split_seed)?;
    let hash = dataset_hash(&rows);
    let echo = json!({
        "source": source,
        "sizing": cfg.sizing,
        "train_fraction": cfg.dataset.train_fraction,
        "split_seed": cfg.dataset.split_seed,
        "hash": hash,
    });
    Ok(Dataset {
        rows,
        split,
        hash,
        echo,
    })
}

pub fn runs_dir(out: &Path) -> PathBuf {
    out.join("runs")
}

pub fn cell_path(out: &Path, scenario: u8, seed: u64, method: Method) -> PathBuf {
    runs_dir(out)
        .join(format!("scenario{scenario}"))
        .join(format!("seed{seed}"))
        .join(format!("{}.json", method.id()))
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn read_result(path: &Path) -> anyhow::Result<RunResult> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cell_echo(data: &Dataset, scenario: u8, seed: u64, method: Method) -> serde_json::Value {
    json!({
        "dataset": data.echo,
        "scenario": scenario,
        "seed": seed,
        "method": method,
    })
}

/// A stored result can stand in for a fresh run when it was produced from
/// the same data, scenario, seed and training settings.
fn reusable(path: &Path, data: &Dataset, cfg: &proder_core::strategies::StrategyConfig, echo: &serde_json::Value) -> Option<RunResult> {
    let r = read_result(path).ok()?;
    (r.dataset_hash == data.hash && r.strategy == *cfg && r.echo == *echo).then_some(r)
}

#[derive(Debug, Default)]
pub struct RunSummary {
    pub written: Vec<PathBuf>,
    pub reused: Vec<PathBuf>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Reuse any stored cell with a matching key, not only Joint.
    pub resume: bool,
}

/// Runs every requested cell, Joint first within each (scenario, seed).
/// A failing cell is reported and the remaining cells still run.
pub fn execute(cfg: &RunConfig, opts: RunOptions, log: &mut dyn FnMut(&str)) -> anyhow::Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.output_dir();
    let data = load_dataset(cfg)?;
    log(&format!(
        "dataset {}: {} train / {} test windows",
        &data.hash[..12],
        data.split.train.len(),
        data.split.test.len()
    ));
    let mut summary = RunSummary::default();
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();
    for &scenario_id in &cfg.scenarios {
        let scenario = build_scenario(&data.split, scenario_id)?;
        let strategy = cfg.strategy_for(scenario_id)?;
        for &seed in &cfg.seeds {
            let joint_path = cell_path(&out, scenario_id, seed, Method::Joint);
            let joint_echo = cell_echo(&data, scenario_id, seed, Method::Joint);
            let mut joint_acc = reusable(&joint_path, &data, &strategy, &joint_echo).map(|r| r.final_acc);
            if joint_acc.is_some() && methods.contains(&Method::Joint) {
                log(&format!("scenario {scenario_id} seed {seed} joint: cached"));
                summary.reused.push(joint_path.clone());
            }
            for &method in &methods {
                if method == Method::Joint && joint_acc.is_some() {
                    continue;
                }
                let path = cell_path(&out, scenario_id, seed, method);
                let echo = cell_echo(&data, scenario_id, seed, method);
                if opts.resume {
                    if let Some(r) = reusable(&path, &data, &strategy, &echo) {
                        if method == Method::Joint || Some(r.joint_acc) == joint_acc {
                            log(&format!("scenario {scenario_id} seed {seed} {method}: cached"));
                            summary.reused.push(path);
                            continue;
                        }
                    }
                }
                let label = format!("scenario {scenario_id} seed {seed} {method}");
                if method != Method::Joint && joint_acc.is_none() {
                    let e = Error::Orchestration(format!(
                        "{label}: no Joint result for this dataset, scenario and seed; run with --method joint first"
                    ));
                    log(&e.to_string());
                    summary.failures.push(e.to_string());
                    continue;
                }
                match run_cell(method, &data.split, &scenario, &strategy, seed, joint_acc, &data.hash, echo) {
                    Ok(r) => {
                        log(&format!("{label}: ACC {:.4} ({:.1}s)", r.final_acc, r.wall_clock_secs));
                        if method == Method::Joint {
                            joint_acc = Some(r.final_acc);
                        }
                        write_atomic(&path, serde_json::to_string_pretty(&r)?.as_bytes())?;
                        summary.written.push(path);
                    }
                    Err(e) => {
                        log(&format!("{label}: failed: {e}"));
                        summary.failures.push(format!("{label}: {e}"));
                    }
                }
            }
        }
    }
    Ok(summary)
}

/// Error for a summary with failed cells.
pub fn check_summary(summary: &RunSummary) -> anyhow::Result<()> {
    if summary.failures.is_empty() {
        Ok(())
    } else {
        Err(anyhow!("{} cell(s) failed:\n{}", summary.failures.len(), summary.failures.join("\n")))
    }
}
