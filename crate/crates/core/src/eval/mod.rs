//! Accuracy matrix, final accuracy over the whole test set, gap to Joint,
//! and the per-run result record.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Scenario, Target, TimeWindow, WINDOW};
use crate::error::{Error, Result};
use crate::model::BiGruClassifier;
use crate::replay::{memory_bytes, MemoryAccounting};
use crate::strategies::{drive, Learner, Method, StrategyConfig};

/// Version of the [`RunResult`] JSON layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(z: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Correct predictions on `windows`, eval mode.
pub fn count_correct(model: &BiGruClassifier<f32>, windows: &[&TimeWindow], target: Target) -> Result<usize> {
    let head = model.classes();
    if let Some(w) = windows.iter().find(|w| target.label(w) >= head) {
        return Err(Error::Evaluation(format!(
            "window {} has label {} but the head has {head} classes",
            w.id,
            target.label(w)
        )));
    }
    if windows.is_empty() {
        return Ok(0);
    }
    let logits = model.logits(windows, WINDOW)?;
    Ok(logits
        .iter()
        .zip(windows)
        .filter(|(z, w)| argmax(z) == target.label(w))
        .count())
}

/// Fraction of `windows` classified correctly.
pub fn evaluate_full(model: &BiGruClassifier<f32>, windows: &[TimeWindow], target: Target) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let refs: Vec<&TimeWindow> = windows.iter().collect();
    Ok(count_correct(model, &refs, target)? as f64 / windows.len() as f64)
}

/// `A[t][j]` for `j ≤ t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the row for the next task; it must have one entry per task so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::InternalState(format!(
                "row {} needs {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InternalState(format!("accuracy outside [0, 1]: {row:?}")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(j)).copied()
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Unweighted mean of the last row over tasks before the last one.
    pub fn mean_old_accuracy(&self) -> Option<f64> {
        let last = self.rows.last()?;
        let old = &last[..last.len() - 1];
        (!old.is_empty()).then(|| old.iter().sum::<f64>() / old.len() as f64)
    }
}

/// `acc_joint − acc_cl`, negative when the method beats Joint.
pub fn compute_gap(acc_cl: f64, acc_joint: f64) -> f64 {
    acc_joint - acc_cl
}

/// Per-subset counts from one pass over the test subsets of tasks `0..=t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
}

impl SubsetCounts {
    pub fn accuracies(&self) -> Vec<f64> {
        self.correct
            .iter()
            .zip(&self.total)
            .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect()
    }

    /// Window-weighted accuracy over every counted subset.
    pub fn pooled(&self) -> f64 {
        let n: usize = self.total.iter().sum();
        if n == 0 {
            0.0
        } else {
            self.correct.iter().sum::<usize>() as f64 / n as f64
        }
    }
}

pub fn evaluate_subsets(
    model: &BiGruClassifier<f32>,
    split: &DatasetSplit,
    scenario: &Scenario,
    through: usize,
) -> Result<SubsetCounts> {
    let target = scenario.plan.target;
    let mut counts = SubsetCounts {
        correct: Vec::new(),
        total: Vec::new(),
    };
    for subset in &scenario.test_subsets[..=through] {
        let windows: Vec<&TimeWindow> = subset.iter().map(|&i| &split.test[i]).collect();
        counts.correct.push(count_correct(model, &windows, target)?);
        counts.total.push(windows.len());
    }
    Ok(counts)
}

/// Everything recorded about one (method, scenario, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema_version: u32,
    pub method: Method,
    pub scenario: u8,
    pub seed: u64,
    pub dataset_hash: String,
    pub matrix: AccuracyMatrix,
    pub final_acc: f64,
    pub joint_acc: f64,
    pub gap: f64,
    pub memory: Option<MemoryAccounting>,
    pub final_epoch_loss: Vec<f64>,
    pub wall_clock_secs: f64,
    pub strategy: StrategyConfig,
    /// Whatever the caller needs to re-run the cell (dataset source etc).
    pub echo: serde_json::Value,
}

/// Trains one cell and evaluates it after every task. `joint_acc` must be
/// given for every method except Joint, whose own final accuracy is used.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    method: Method,
    split: &DatasetSplit,
    scenario: &Scenario,
    cfg: &StrategyConfig,
    seed: u64,
    joint_acc: Option<f64>,
    dataset_hash: &str,
    echo: serde_json::Value,
) -> Result<RunResult> {
    let learner = Learner::new(method, cfg, scenario.plan.target, seed)?;
    run_learner(learner, split, scenario, cfg, seed, joint_acc, dataset_hash, echo)
}

/// [`run_cell`] with a prepared learner.
#[allow(clippy::too_many_arguments)]
pub fn run_learner(
    learner: Learner,
    split: &DatasetSplit,
    scenario: &Scenario,
    cfg: &StrategyConfig,
    seed: u64,
    joint_acc: Option<f64>,
    dataset_hash: &str,
    echo: serde_json::Value,
) -> Result<RunResult> {
    let method = learner.method();
    if method != Method::Joint && joint_acc.is_none() {
        return Err(Error::Orchestration(format!(
            "{} on scenario {} seed {seed} needs the Joint result; run the joint method first",
            method.display_name(),
            scenario.plan.id
        )));
    }
    let started = Instant::now();
    let mut matrix = AccuracyMatrix::new();
    let mut last = None;
    let run = drive(learner, split, scenario, |t, model| {
        let counts = evaluate_subsets(model, split, scenario, t)?;
        matrix.push_row(counts.accuracies())?;
        last = Some(counts);
        Ok(())
    })?;
    let last = last.ok_or_else(|| Error::InternalState("scenario without tasks".into()))?;
    let final_acc = evaluate_full(&run.learner.model, &split.test, scenario.plan.target)?;
    if last.total.iter().sum::<usize>() == split.test.len() && (last.pooled() - final_acc).abs() > 1e-12 {
        return Err(Error::InternalState(format!(
            "final accuracy {final_acc} disagrees with the per-task pass {}",
            last.pooled()
        )));
    }
    let joint_acc = joint_acc.unwrap_or(final_acc);
    let memory = run
        .learner
        .buffer
        .as_ref()
        .map(|b| memory_bytes(b, if method == Method::Proder { run.learner.bank.len() } else { 0 }));
    Ok(RunResult {
        schema_version: SCHEMA_VERSION,
        method,
        scenario: scenario.plan.id,
        seed,
        dataset_hash: dataset_hash.to_string(),
        matrix,
        final_acc,
        joint_acc,
        gap: compute_gap(final_acc, joint_acc),
        memory,
        final_epoch_loss: run.final_epoch_loss,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        strategy: cfg.clone(),
        echo,
    })
}
