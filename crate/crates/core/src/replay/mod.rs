//! Fixed-capacity rehearsal memory shared by the replay strategies.
//!
//! Slots are balanced over *groups*, a group being the `(task, label)` pair
//! an entry was inserted under. In class-incremental plans every label
//! belongs to one task, so this is the same as balancing over classes; in
//! the domain-incremental plan it keeps every zone represented.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Target, TimeWindow, FEATURES, WINDOW};
use crate::error::{Error, Result};
use crate::model::{BiGruClassifier, FEATURE_DIM};

pub const CAPACITY: usize = 363;
pub const WINDOW_BYTES: usize = WINDOW * FEATURES * 4;
pub const LABEL_BYTES: usize = 8;
pub const LOGIT_BYTES: usize = 4;
pub const PROTOTYPE_BYTES: usize = FEATURE_DIM * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Uniform,
    PrototypeAware,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub window: TimeWindow,
    pub label: usize,
    /// Logits at insertion time, as wide as the head was then.
    pub logits: Option<Vec<f32>>,
    pub task: usize,
    /// Squared distance to the class prototype when last selected.
    pub distance: Option<f64>,
}

/// Per-class prototypes, as far as buffer selection is concerned.
pub trait PrototypeLookup {
    fn prototype(&self, class: usize) -> Option<&[f32]>;
}

impl PrototypeLookup for BTreeMap<usize, Vec<f32>> {
    fn prototype(&self, class: usize) -> Option<&[f32]> {
        self.get(&class).map(Vec::as_slice)
    }
}

/// `base = capacity / classes` everywhere, one extra slot for the
/// `capacity % classes` lowest-numbered classes.
pub fn quota(capacity: usize, seen_classes: usize) -> Vec<usize> {
    if seen_classes == 0 {
        return Vec::new();
    }
    let base = capacity / seen_classes;
    let extra = capacity % seen_classes;
    (0..seen_classes).map(|c| base + usize::from(c < extra)).collect()
}

/// Balanced quotas capped by what each group can supply. Slots a group
/// cannot use go, one at a time, to the group holding the fewest, ties
/// to the lowest group.
pub fn allocate(capacity: usize, available: &[usize]) -> Vec<usize> {
    let mut target: Vec<usize> = quota(capacity, available.len())
        .into_iter()
        .zip(available)
        .map(|(q, &a)| q.min(a))
        .collect();
    let mut left = capacity - target.iter().sum::<usize>();
    while left > 0 {
        let open = (0..target.len())
            .filter(|&g| target[g] < available[g])
            .min_by_key(|&g| (target[g], g));
        match open {
            Some(g) => {
                target[g] += 1;
                left -= 1;
            }
            None => break,
        }
    }
    target
}

pub fn prototype_distances(features: &[Vec<f32>], prototype: &[f32]) -> Result<Vec<f64>> {
    features
        .iter()
        .map(|f| {
            if f.len() != prototype.len() {
                return Err(Error::Dimension {
                    op: "prototype_distances",
                    left: vec![f.len()],
                    right: vec![prototype.len()],
                });
            }
            Ok(f.iter()
                .zip(prototype)
                .map(|(a, b)| {
                    let d = *a as f64 - *b as f64;
                    d * d
                })
                .sum())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Candidate positions, nearest first.
    pub chosen: Vec<usize>,
    /// `K` minus the number of candidates when there were too few.
    pub shortfall: usize,
}

/// Keeps the `⌊ρK⌋` nearest and `K − ⌊ρK⌋` farthest candidates. Candidates
/// are ordered by `(distance, position)`, so equal distances resolve to the
/// earlier stream position.
pub fn select_hybrid(distances: &[f64], k: usize, rho: f64) -> Selection {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    if distances.len() <= k {
        return Selection {
            chosen: order,
            shortfall: k - distances.len(),
        };
    }
    let near = near_count(k, rho);
    let mut chosen = order[..near].to_vec();
    chosen.extend_from_slice(&order[distances.len() - (k - near)..]);
    Selection { chosen, shortfall: 0 }
}

/// `⌊ρK⌋`, robust to `ρK` landing a hair below an integer.
pub fn near_count(k: usize, rho: f64) -> usize {
    ((rho.clamp(0.0, 1.0) * k as f64 + 1e-9).floor() as usize).min(k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryAccounting {
    pub entries: usize,
    pub logit_values: usize,
    pub prototypes: usize,
    pub entry_bytes: usize,
    pub prototype_bytes: usize,
    pub total_bytes: usize,
    pub total_kib: f64,
}

impl MemoryAccounting {
    /// Every entry carrying `logits_per_entry` logits (if any).
    pub fn nominal(entries: usize, logits_per_entry: Option<usize>, prototypes: usize) -> Self {
        Self::from_parts(entries, entries * logits_per_entry.unwrap_or(0), prototypes)
    }

    fn from_parts(entries: usize, logit_values: usize, prototypes: usize) -> Self {
        let entry_bytes = entries * (WINDOW_BYTES + LABEL_BYTES) + logit_values * LOGIT_BYTES;
        let prototype_bytes = prototypes * PROTOTYPE_BYTES;
        let total_bytes = entry_bytes + prototype_bytes;
        Self {
            entries,
            logit_values,
            prototypes,
            entry_bytes,
            prototype_bytes,
            total_bytes,
            total_kib: total_bytes as f64 / 1024.0,
        }
    }
}

/// Accounting of what the buffer actually holds plus `prototype_count`
/// stored prototypes.
pub fn memory_bytes(buffer: &ReplayBuffer, prototype_count: usize) -> MemoryAccounting {
    let logits = buffer
        .entries
        .iter()
        .map(|e| e.logits.as_ref().map_or(0, Vec::len))
        .sum();
    MemoryAccounting::from_parts(buffer.entries.len(), logits, prototype_count)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpEntry {
    pub window_id: usize,
    pub label: usize,
    pub task: usize,
    pub distance: Option<f64>,
    pub logit_width: usize,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    policy: Policy,
    store_logits: bool,
    entries: Vec<ReplayEntry>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, policy: Policy, store_logits: bool, seed: u64) -> Self {
        Self {
            capacity,
            policy,
            store_logits,
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    /// Entry count per label.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.label).or_insert(0) += 1;
        }
        out
    }

    /// Entry count per `(task, label)` group.
    pub fn group_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry((e.task, e.label)).or_insert(0) += 1;
        }
        out
    }

    /// `n` distinct entries drawn uniformly with `rng`.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a ReplayEntry> {
        let n = n.min(self.entries.len());
        sample(rng, self.entries.len(), n)
            .into_iter()
            .map(|i| &self.entries[i])
            .collect()
    }

    pub fn dump(&self) -> Vec<DumpEntry> {
        self.entries
            .iter()
            .map(|e| DumpEntry {
                window_id: e.window.id,
                label: e.label,
                task: e.task,
                distance: e.distance,
                logit_width: e.logits.as_ref().map_or(0, Vec::len),
            })
            .collect()
    }

    /// End-of-task update with uniform eviction and uniform insertion.
    pub fn update_uniform(
        &mut self,
        stream: &[&TimeWindow],
        target: Target,
        task: usize,
        model: &BiGruClassifier<f32>,
    ) -> Result<()> {
        let plan = self.plan(stream, target, task);
        let mut kept = Vec::with_capacity(self.capacity);
        let old = std::mem::take(&mut self.entries);
        let mut by_group: BTreeMap<(usize, usize), Vec<ReplayEntry>> = BTreeMap::new();
        for e in old {
            by_group.entry((e.task, e.label)).or_default().push(e);
        }
        for (key, mut members) in by_group {
            let keep = plan.target(key);
            let mut pick = sample(&mut self.rng, members.len(), keep).into_vec();
            pick.sort_unstable();
            let mut it = pick.into_iter().peekable();
            for (i, e) in members.drain(..).enumerate() {
                if it.peek() == Some(&i) {
                    it.next();
                    kept.push(e);
                }
            }
        }
        let mut inserted: Vec<(&TimeWindow, usize)> = Vec::new();
        for (&label, idx) in &plan.fresh {
            let n = plan.target((task, label));
            let mut pick = sample(&mut self.rng, idx.len(), n).into_vec();
            pick.sort_unstable();
            inserted.extend(pick.into_iter().map(|p| (stream[idx[p]], label)));
        }
        self.insert(kept, &inserted, None, task, model)
    }

    /// End-of-task update that keeps, per group, the nearest `⌊ρK⌋` and the
    /// farthest remaining windows relative to the class prototype. Shrinking
    /// groups are re-selected with distances from the current model.
    pub fn update_prototype_aware<P: PrototypeLookup + ?Sized>(
        &mut self,
        stream: &[&TimeWindow],
        target: Target,
        task: usize,
        model: &BiGruClassifier<f32>,
        prototypes: &P,
        rho: f64,
    ) -> Result<()> {
        let plan = self.plan(stream, target, task);
        let proto = |label: usize| -> Result<&[f32]> {
            prototypes
                .prototype(label)
                .ok_or_else(|| Error::InternalState(format!("no prototype for class {label}")))
        };
        let old = std::mem::take(&mut self.entries);
        let mut by_group: BTreeMap<(usize, usize), Vec<ReplayEntry>> = BTreeMap::new();
        for e in old {
            by_group.entry((e.task, e.label)).or_default().push(e);
        }
        let mut kept = Vec::with_capacity(self.capacity);
        for (key, members) in by_group {
            let keep = plan.target(key);
            if keep >= members.len() {
                kept.extend(members);
                continue;
            }
            let feats = model.extract_features(&members.iter().map(|e| &e.window).collect::<Vec<_>>(), WINDOW)?;
            let dist = prototype_distances(&feats, proto(key.1)?)?;
            let sel = select_hybrid(&dist, keep, rho);
            let mut slots: Vec<Option<ReplayEntry>> = members.into_iter().map(Some).collect();
            for i in sel.chosen {
                let mut e = slots[i].take().expect("selection indices are distinct");
                e.distance = Some(dist[i]);
                kept.push(e);
            }
        }
        let mut inserted: Vec<(&TimeWindow, usize)> = Vec::new();
        let mut distances = Vec::new();
        for (&label, idx) in &plan.fresh {
            let n = plan.target((task, label));
            let windows: Vec<&TimeWindow> = idx.iter().map(|&i| stream[i]).collect();
            let feats = model.extract_features(&windows, WINDOW)?;
            let dist = prototype_distances(&feats, proto(label)?)?;
            for i in select_hybrid(&dist, n, rho).chosen {
                inserted.push((windows[i], label));
                distances.push(dist[i]);
            }
        }
        self.insert(kept, &inserted, Some(&distances), task, model)
    }

    fn insert(
        &mut self,
        mut kept: Vec<ReplayEntry>,
        inserted: &[(&TimeWindow, usize)],
        distances: Option<&[f64]>,
        task: usize,
        model: &BiGruClassifier<f32>,
    ) -> Result<()> {
        let logits = if self.store_logits && !inserted.is_empty() {
            let windows: Vec<&TimeWindow> = inserted.iter().map(|(w, _)| *w).collect();
            Some(model.logits(&windows, WINDOW)?)
        } else {
            None
        };
        for (i, (w, label)) in inserted.iter().enumerate() {
            kept.push(ReplayEntry {
                window: (*w).clone(),
                label: *label,
                logits: logits.as_ref().map(|l| l[i].clone()),
                task,
                distance: distances.map(|d| d[i]),
            });
        }
        kept.sort_by_key(|e| (e.task, e.label, e.window.id));
        debug_assert!(kept.len() <= self.capacity);
        self.entries = kept;
        Ok(())
    }

    // Re-running an update for the same task replaces that task's entries.
    fn plan(&mut self, stream: &[&TimeWindow], target: Target, task: usize) -> UpdatePlan {
        self.entries.retain(|e| e.task != task);
        let mut fresh: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, w) in stream.iter().enumerate() {
            fresh.entry(target.label(w)).or_default().push(i);
        }
        let mut groups: BTreeMap<(usize, usize), usize> = self.group_counts();
        for (&label, idx) in &fresh {
            *groups.entry((task, label)).or_insert(0) += idx.len();
        }
        let keys: Vec<(usize, usize)> = groups.keys().copied().collect();
        let available: Vec<usize> = groups.values().copied().collect();
        let targets = allocate(self.capacity, &available);
        UpdatePlan {
            fresh,
            targets: keys.into_iter().zip(targets).collect(),
        }
    }
}

struct UpdatePlan {
    /// Stream positions per label of the task being closed.
    fresh: BTreeMap<usize, Vec<usize>>,
    targets: BTreeMap<(usize, usize), usize>,
}

impl UpdatePlan {
    fn target(&self, key: (usize, usize)) -> usize {
        self.targets.get(&key).copied().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests;
