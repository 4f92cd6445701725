//! Aggregates stored run results into CSV tables and per-task curves.
//!
//! Files written to the output root:
//! - `cells.csv`: one row per (scenario, method, seed), values copied from the JSONs
//! - `table.csv`: mean over seeds per (scenario, method) with a best-ACC flag
//! - `grid.csv`: methods × scenarios, ACC and gap side by side
//! - `curves.csv`: mean accuracy over tasks seen so far, after each task
//! - `matrix.csv`: every `A[t][j]`
//!
//! Wall-clock time is deliberately left out so reruns give identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::Context;
use proder_core::eval::RunResult;
use proder_core::strategies::Method;
use proder_core::Error;

use crate::run::{read_result, runs_dir, write_atomic};

pub fn collect_results(out: &Path) -> anyhow::Result<Vec<RunResult>> {
    let mut paths = Vec::new();
    find_json(&runs_dir(out), &mut paths)?;
    paths.sort();
    let mut results: Vec<RunResult> = paths.iter().map(|p| read_result(p)).collect::<anyhow::Result<_>>()?;
    results.sort_by_key(|r| (r.scenario, r.method, r.seed));
    Ok(results)
}

fn find_json(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            find_json(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    Ok(())
}

/// Results of one scenario must share data and training settings, and every
/// gap must point at the stored Joint result of its seed.
pub fn check_consistency(results: &[RunResult]) -> proder_core::Result<()> {
    let mut conflicts = Vec::new();
    let mut by_scenario: BTreeMap<u8, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        by_scenario.entry(r.scenario).or_default().push(r);
    }
    for (s, rs) in &by_scenario {
        let first = rs[0];
        for r in rs {
            if r.dataset_hash != first.dataset_hash {
                conflicts.push(format!(
                    "scenario {s}: {} seed {} used dataset {} but {} seed {} used {}",
                    r.method, r.seed, r.dataset_hash, first.method, first.seed, first.dataset_hash
                ));
            }
            if r.strategy != first.strategy {
                conflicts.push(format!(
                    "scenario {s}: {} seed {} and {} seed {} were trained with different settings",
                    r.method, r.seed, first.method, first.seed
                ));
            }
            if r.echo.get("dataset") != first.echo.get("dataset") {
                conflicts.push(format!(
                    "scenario {s}: {} seed {} and {} seed {} describe different data sources",
                    r.method, r.seed, first.method, first.seed
                ));
            }
        }
        for r in rs {
            let joint = rs.iter().find(|j| j.method == Method::Joint && j.seed == r.seed);
            match joint {
                Some(j) if j.final_acc.to_bits() != r.joint_acc.to_bits() => conflicts.push(format!(
                    "scenario {s}: {} seed {} references Joint ACC {} but the stored Joint has {}",
                    r.method, r.seed, r.joint_acc, j.final_acc
                )),
                None => conflicts.push(format!(
                    "scenario {s}: {} seed {} has no stored Joint result",
                    r.method, r.seed
                )),
                _ => {}
            }
        }
    }
    if conflicts.is_empty() {
        Ok(())
    } else {
        Err(Error::Report(conflicts.join("\n")))
    }
}

/// Mean over seeds for one (scenario, method).
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub scenario: u8,
    pub method: Method,
    pub seeds: usize,
    pub acc: f64,
    pub gap: f64,
    pub best: bool,
    /// Mean over seeds of the mean of `A[t][j]` over `j ≤ t`, per task `t`.
    pub curve: Vec<f64>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn summarize(results: &[RunResult]) -> Vec<TableRow> {
    let mut groups: BTreeMap<(u8, Method), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups.entry((r.scenario, r.method)).or_default().push(r);
    }
    let mut rows: Vec<TableRow> = groups
        .into_iter()
        .map(|((scenario, method), rs)| {
            let tasks = rs.iter().map(|r| r.matrix.tasks()).min().unwrap_or(0);
            let curve = (0..tasks)
                .map(|t| mean(rs.iter().map(|r| mean(r.matrix.rows()[t].iter().copied()))))
                .collect();
            TableRow {
                scenario,
                method,
                seeds: rs.len(),
                acc: mean(rs.iter().map(|r| r.final_acc)),
                gap: mean(rs.iter().map(|r| r.gap)),
                best: false,
                curve,
            }
        })
        .collect();
    let scenarios: BTreeSet<u8> = rows.iter().map(|r| r.scenario).collect();
    for s in scenarios {
        let top = rows
            .iter()
            .filter(|r| r.scenario == s)
            .map(|r| r.acc)
            .fold(f64::NEG_INFINITY, f64::max);
        for r in rows.iter_mut().filter(|r| r.scenario == s) {
            r.best = r.acc == top;
        }
    }
    rows
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)
}

/// Writes every report file and returns their paths.
pub fn write_report(out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let results = collect_results(out)?;
    if results.is_empty() {
        return Err(Error::Report(format!("no run results under {}", runs_dir(out).display())).into());
    }
    check_consistency(&results)?;
    let rows = summarize(&results);
    let mut files = Vec::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> anyhow::Result<()> {
        let path = out.join(name);
        write_atomic(&path, &bytes)?;
        files.push(path);
        Ok(())
    };

    emit(
        "cells.csv",
        csv_bytes(
            &["scenario", "method", "seed", "acc", "joint_acc", "gap", "memory_bytes"],
            results.iter().map(|r| {
                vec![
                    r.scenario.to_string(),
                    r.method.id().to_string(),
                    r.seed.to_string(),
                    r.final_acc.to_string(),
                    r.joint_acc.to_string(),
                    r.gap.to_string(),
                    r.memory.as_ref().map_or(String::new(), |m| m.total_bytes.to_string()),
                ]
            }),
        )?,
    )?;

    emit(
        "table.csv",
        csv_bytes(
            &["scenario", "method", "seeds", "acc", "gap", "best"],
            rows.iter().map(|r| {
                vec![
                    r.scenario.to_string(),
                    r.method.display_name().to_string(),
                    r.seeds.to_string(),
                    r.acc.to_string(),
                    r.gap.to_string(),
                    if r.best { "*".into() } else { String::new() },
                ]
            }),
        )?,
    )?;

    let scenarios: Vec<u8> = rows.iter().map(|r| r.scenario).collect::<BTreeSet<_>>().into_iter().collect();
    let methods: Vec<Method> = rows.iter().map(|r| r.method).collect::<BTreeSet<_>>().into_iter().collect();
    let mut header = vec!["method".to_string()];
    for s in &scenarios {
        header.push(format!("s{s}_acc"));
        header.push(format!("s{s}_gap"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    emit(
        "grid.csv",
        csv_bytes(
            &header_refs,
            methods.iter().map(|&m| {
                let mut line = vec![m.display_name().to_string()];
                for &s in &scenarios {
                    match rows.iter().find(|r| r.scenario == s && r.method == m) {
                        Some(r) => {
                            line.push(format!("{}{}", r.acc, if r.best { "*" } else { "" }));
                            line.push(r.gap.to_string());
                        }
                        None => line.extend([String::new(), String::new()]),
                    }
                }
                line
            }),
        )?,
    )?;

    emit(
        "curves.csv",
        csv_bytes(
            &["scenario", "method", "task", "acc"],
            rows.iter().flat_map(|r| {
                r.curve.iter().enumerate().map(move |(t, a)| {
                    vec![r.scenario.to_string(), r.method.display_name().to_string(), (t + 1).to_string(), a.to_string()]
                })
            }),
        )?,
    )?;

    emit(
        "matrix.csv",
        csv_bytes(
            &["scenario", "method", "seed", "after_task", "task", "acc"],
            results.iter().flat_map(|r| {
                r.matrix.rows().iter().enumerate().flat_map(move |(t, row)| {
                    row.iter().enumerate().map(move |(j, a)| {
                        vec![
                            r.scenario.to_string(),
                            r.method.id().to_string(),
                            r.seed.to_string(),
                            (t + 1).to_string(),
                            (j + 1).to_string(),
                            a.to_string(),
                        ]
                    })
                })
            }),
        )?,
    )?;
    Ok(files)
}
