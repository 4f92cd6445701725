//! Featurized sensor rows, normalization, windowing and the scenario task
//! streams built on top of them.

mod csv_io;
mod scenario;
mod synth;

pub use csv_io::{load_csv, read_csv, save_csv, write_csv};
pub use scenario::{build_scenario, Scenario, ScenarioPlan, Target, TaskSpec};
pub use synth::{generate_synthetic, GeneratorConfig};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FEATURES: usize = 51;
pub const FAULT_TYPES: usize = 11;
pub const ZONES: usize = 4;
pub const RESISTANCE_IDS: usize = 22;
pub const WINDOW: usize = 12;
pub const STRIDE: usize = WINDOW / 2;
pub const TRAIN_FRACTION: f64 = 0.8;

/// Standard deviations below this count as a constant column.
pub const CONSTANT_STD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub features: Vec<f32>,
    pub fault_type: usize,
    pub zone: usize,
    /// Provenance only; never used for training.
    pub resistance_id: usize,
}

impl SampleRow {
    pub fn validate(&self) -> Result<()> {
        if self.features.len() != FEATURES {
            return Err(Error::Schema(format!(
                "expected {FEATURES} features, found {}",
                self.features.len()
            )));
        }
        if self.fault_type >= FAULT_TYPES {
            return Err(Error::Data(format!("fault_type {} out of range", self.fault_type)));
        }
        if self.zone >= ZONES {
            return Err(Error::Data(format!("zone {} out of range", self.zone)));
        }
        if self.resistance_id >= RESISTANCE_IDS {
            return Err(Error::Data(format!("resistance_id {} out of range", self.resistance_id)));
        }
        Ok(())
    }
}

/// `WINDOW` consecutive rows of one `(fault_type, zone)` group, flattened
/// row-major (`WINDOW × FEATURES`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    /// Position inside its split; stable across runs with the same data.
    pub id: usize,
    pub data: Vec<f32>,
    pub fault_type: usize,
    pub zone: usize,
}

impl AsRef<[f32]> for TimeWindow {
    fn as_ref(&self) -> &[f32] {
        &self.data
    }
}

/// Per-feature statistics of the fitted rows (population convention).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub constant: Vec<bool>,
}

impl ZScore {
    pub fn fit(rows: &[&[f32]]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Data("cannot fit normalization on zero rows".into()));
        };
        let d = first.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Schema(format!("ragged rows: {} vs {d} features", bad.len())));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0f64; d];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(r.iter()) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; d];
        for r in rows {
            for ((s, &v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                let e = v as f64 - m;
                *s += e * e;
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        let constant = std.iter().map(|&s| s < CONSTANT_STD).collect();
        Ok(Self { mean, std, constant })
    }

    pub fn apply(&self, row: &mut [f32]) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if self.constant[j] {
                0.0
            } else {
                ((*v as f64 - self.mean[j]) / self.std[j]) as f32
            };
        }
    }

    pub fn constant_columns(&self) -> Vec<usize> {
        (0..self.constant.len()).filter(|&j| self.constant[j]).collect()
    }
}

/// Fits per-feature statistics on `rows` and returns the normalized copy.
pub fn zscore_fit_apply(rows: &[SampleRow]) -> Result<(Vec<SampleRow>, ZScore)> {
    let views: Vec<&[f32]> = rows.iter().map(|r| r.features.as_slice()).collect();
    let stats = ZScore::fit(&views)?;
    let mut out = rows.to_vec();
    for r in &mut out {
        stats.apply(&mut r.features);
    }
    Ok((out, stats))
}

/// Number of windows a group of `n` rows yields after trimming.
pub fn window_count(n: usize) -> usize {
    let trimmed = WINDOW * (n / WINDOW);
    if trimmed < WINDOW {
        0
    } else {
        (trimmed - WINDOW) / STRIDE + 1
    }
}

/// Window start offsets inside a group of `n` rows.
pub fn window_offsets(n: usize) -> impl Iterator<Item = usize> {
    (0..window_count(n)).map(|k| k * STRIDE)
}

// Row indices ordered by (fault_type, zone), generation order kept inside a
// group, then split into maximal runs of one group.
fn grouped_rows(rows: &[SampleRow]) -> Vec<((usize, usize), Vec<usize>)> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by_key(|&i| (rows[i].fault_type, rows[i].zone));
    let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
    for i in order {
        let key = (rows[i].fault_type, rows[i].zone);
        match groups.last_mut() {
            Some((k, members)) if *k == key => members.push(i),
            _ => groups.push((key, vec![i])),
        }
    }
    groups
}

fn assemble(rows: &[SampleRow], idx: &[usize], id: usize, stats: Option<&ZScore>) -> TimeWindow {
    let mut data = Vec::with_capacity(WINDOW * FEATURES);
    for &i in idx {
        let start = data.len();
        data.extend_from_slice(&rows[i].features);
        if let Some(s) = stats {
            s.apply(&mut data[start..]);
        }
    }
    TimeWindow {
        id,
        data,
        fault_type: rows[idx[0]].fault_type,
        zone: rows[idx[0]].zone,
    }
}

/// Sorts rows by class, trims every `(fault_type, zone)` group to a multiple
/// of the window length and cuts overlapping windows. No normalization.
pub fn windowize(rows: &[SampleRow]) -> Vec<TimeWindow> {
    let mut out = Vec::new();
    for (_, members) in grouped_rows(rows) {
        for off in window_offsets(members.len()) {
            let id = out.len();
            out.push(assemble(rows, &members[off..off + WINDOW], id, None));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<TimeWindow>,
    pub test: Vec<TimeWindow>,
    pub normalization: ZScore,
}

impl DatasetSplit {
    /// Stratified split at the window level: each `(fault_type, zone)` group
    /// keeps `round(fraction · windows)` for training, chosen by `seed`.
    /// Statistics are fitted on the rows covered by training windows only.
    pub fn build(rows: &[SampleRow], train_fraction: f64, seed: u64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("no rows".into()));
        }
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Parameter(format!("train fraction {train_fraction} outside [0, 1]")));
        }
        for (i, r) in rows.iter().enumerate() {
            r.validate().map_err(|e| Error::DataRow {
                row: i + 1,
                msg: e.to_string(),
            })?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train_spans = Vec::new();
        let mut test_spans = Vec::new();
        let groups = grouped_rows(rows);
        for (_, members) in &groups {
            let spans: Vec<&[usize]> = window_offsets(members.len())
                .map(|o| &members[o..o + WINDOW])
                .collect();
            let n_train = (train_fraction * spans.len() as f64).round() as usize;
            let mut pick: Vec<usize> = (0..spans.len()).collect();
            pick.shuffle(&mut rng);
            let chosen: BTreeSet<usize> = pick[..n_train].iter().copied().collect();
            for (k, s) in spans.into_iter().enumerate() {
                if chosen.contains(&k) {
                    train_spans.push(s);
                } else {
                    test_spans.push(s);
                }
            }
        }
        if train_spans.is_empty() {
            return Err(Error::Data("split leaves no training windows".into()));
        }
        let fit_rows: BTreeSet<usize> = train_spans.iter().flat_map(|s| s.iter().copied()).collect();
        let views: Vec<&[f32]> = fit_rows.iter().map(|&i| rows[i].features.as_slice()).collect();
        let normalization = ZScore::fit(&views)?;
        let make = |spans: &[&[usize]]| -> Vec<TimeWindow> {
            spans
                .iter()
                .enumerate()
                .map(|(id, s)| assemble(rows, s, id, Some(&normalization)))
                .collect()
        };
        Ok(Self {
            train: make(&train_spans),
            test: make(&test_spans),
            normalization,
        })
    }
}

/// SHA-256 over every row's feature bits and labels, in order.
pub fn dataset_hash(rows: &[SampleRow]) -> String {
    let mut h = Sha256::new();
    for r in rows {
        for v in &r.features {
            h.update(v.to_bits().to_le_bytes());
        }
        for l in [r.fault_type, r.zone, r.resistance_id] {
            h.update((l as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests;
