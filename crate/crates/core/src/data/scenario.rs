use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, TimeWindow, FAULT_TYPES, ZONES};
use crate::error::{Error, Result};

/// What the classifier predicts in a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    FaultType,
    Zone,
}

impl Target {
    pub fn label(self, w: &TimeWindow) -> usize {
        match self {
            Target::FaultType => w.fault_type,
            Target::Zone => w.zone,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Target::FaultType => FAULT_TYPES,
            Target::Zone => ZONES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub classes: Vec<usize>,
    /// Only set for the domain-incremental scenario.
    pub zones: Option<Vec<usize>>,
}

impl TaskSpec {
    pub fn admits(&self, target: Target, w: &TimeWindow) -> bool {
        self.classes.contains(&target.label(w)) && self.zones.as_ref().map_or(true, |z| z.contains(&w.zone))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioPlan {
    pub id: u8,
    pub target: Target,
    pub tasks: Vec<TaskSpec>,
}

impl ScenarioPlan {
    pub fn new(id: u8) -> Result<Self> {
        let fault = |sets: &[&[usize]]| -> Vec<TaskSpec> {
            sets.iter()
                .map(|s| TaskSpec {
                    classes: s.to_vec(),
                    zones: None,
                })
                .collect()
        };
        let (target, tasks) = match id {
            1 => (Target::FaultType, fault(&[&[0, 1, 2], &[3, 4], &[5, 6], &[7, 8], &[9, 10]])),
            2 => {
                let mut sets: Vec<Vec<usize>> = vec![vec![0, 1, 2]];
                sets.extend((3..FAULT_TYPES).map(|c| vec![c]));
                let refs: Vec<&[usize]> = sets.iter().map(Vec::as_slice).collect();
                (Target::FaultType, fault(&refs))
            }
            3 => (
                Target::FaultType,
                (0..ZONES)
                    .map(|z| TaskSpec {
                        classes: (0..FAULT_TYPES).collect(),
                        zones: Some(vec![z]),
                    })
                    .collect(),
            ),
            4 => (
                Target::Zone,
                [vec![0, 1], vec![2], vec![3]]
                    .into_iter()
                    .map(|classes| TaskSpec { classes, zones: None })
                    .collect(),
            ),
            other => return Err(Error::Parameter(format!("unknown scenario {other}; expected 1..=4"))),
        };
        Ok(Self { id, target, tasks })
    }

    pub fn total_classes(&self) -> usize {
        self.target.classes()
    }

    /// True when every task brings unseen labels.
    pub fn class_incremental(&self) -> bool {
        self.tasks.iter().all(|t| t.zones.is_none())
    }

    /// Labels that task `t` introduces for the first time, ascending.
    pub fn new_classes(&self, t: usize) -> Vec<usize> {
        let seen: BTreeSet<usize> = self.tasks[..t].iter().flat_map(|s| s.classes.iter().copied()).collect();
        let fresh: BTreeSet<usize> = self.tasks[t].classes.iter().copied().filter(|c| !seen.contains(c)).collect();
        fresh.into_iter().collect()
    }

    /// Head width once task `t` has been introduced.
    pub fn classes_through(&self, t: usize) -> usize {
        (0..=t).map(|k| self.new_classes(k).len()).sum()
    }
}

/// A plan together with its train streams and per-task test subsets, both
/// as indices into the split's `train` and `test` vectors.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub plan: ScenarioPlan,
    pub train_streams: Vec<Vec<usize>>,
    pub test_subsets: Vec<Vec<usize>>,
}

impl Scenario {
    pub fn label(&self, w: &TimeWindow) -> usize {
        self.plan.target.label(w)
    }
}

pub fn build_scenario(split: &DatasetSplit, id: u8) -> Result<Scenario> {
    let plan = ScenarioPlan::new(id)?;
    // labels beyond the plan's range would silently vanish from every stream
    let target = plan.target;
    if let Some(w) = split
        .train
        .iter()
        .chain(&split.test)
        .find(|w| target.label(w) >= plan.total_classes())
    {
        return Err(Error::Data(format!("window {} has label outside the scenario", w.id)));
    }
    let select = |windows: &[TimeWindow], task: &TaskSpec| -> Vec<usize> {
        windows
            .iter()
            .enumerate()
            .filter(|(_, w)| task.admits(target, w))
            .map(|(i, _)| i)
            .collect()
    };
    let train_streams = plan.tasks.iter().map(|t| select(&split.train, t)).collect();
    let test_subsets = plan.tasks.iter().map(|t| select(&split.test, t)).collect();
    Ok(Scenario {
        plan,
        train_streams,
        test_subsets,
    })
}
