use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{FEATURES, WINDOW};

fn tiny_model(classes: usize) -> BiGruClassifier<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = BiGruClassifier::with_dims(FEATURES, 3, 0.0, &mut rng).unwrap();
    m.expand_head(classes, &mut rng).unwrap();
    m
}

fn windows(labels: &[usize], seed: u64) -> Vec<TimeWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels
        .iter()
        .enumerate()
        .map(|(id, &fault_type)| TimeWindow {
            id,
            data: (0..WINDOW * FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            fault_type,
            zone: 0,
        })
        .collect()
}

fn refs(ws: &[TimeWindow]) -> Vec<&TimeWindow> {
    ws.iter().collect()
}

#[test]
fn quota_examples() {
    assert_eq!(quota(363, 11), vec![33; 11]);
    assert_eq!(quota(363, 5), vec![73, 73, 73, 72, 72]);
    assert!(quota(5, 0).is_empty());
}

#[test]
fn short_class_yields_its_slots_in_ascending_order() {
    // quota 10 each, class 0 only has 5 windows
    assert_eq!(allocate(20, &[5, 30]), vec![5, 15]);
    assert_eq!(allocate(30, &[5, 30, 30]), vec![5, 13, 12]);
    assert_eq!(allocate(10, &[2, 3]), vec![2, 3]);

    let mut labels = vec![0; 5];
    labels.extend(vec![1; 30]);
    let ws = windows(&labels, 2);
    let mut buf = ReplayBuffer::new(20, Policy::Uniform, false, 3);
    buf.update_uniform(&refs(&ws), Target::FaultType, 0, &tiny_model(2)).unwrap();
    let counts = buf.class_counts();
    assert_eq!(counts[&0], 5);
    assert_eq!(counts[&1], 15);
}

#[test]
fn prototype_distance_examples() {
    let p = vec![1.0f32, 2.0, 3.0];
    let d = prototype_distances(&[p.clone(), vec![4.0, 6.0, 3.0]], &p).unwrap();
    assert_eq!(d, vec![0.0, 25.0]);
    assert!(prototype_distances(&[vec![0.0; 2]], &p).is_err());
}

#[test]
fn prototype_distances_match_naive_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p: Vec<f32> = (0..300).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let fs: Vec<Vec<f32>> = (0..9).map(|_| (0..300).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let d = prototype_distances(&fs, &p).unwrap();
    for (f, got) in fs.iter().zip(d) {
        let mut acc = 0.0f64;
        for k in 0..300 {
            acc += (f[k] as f64 - p[k] as f64) * (f[k] as f64 - p[k] as f64);
        }
        assert!((acc - got).abs() <= 1e-5);
    }
}

#[test]
fn hybrid_selection_examples() {
    let d = [5.0, 1.0, 3.0, 4.0, 2.0, 6.0];
    let s = select_hybrid(&d, 4, 0.45);
    assert_eq!(s.chosen, vec![1, 3, 0, 5]);
    let s = select_hybrid(&d, 4, 0.5);
    assert_eq!(s.chosen, vec![1, 4, 0, 5]);
    let s = select_hybrid(&d[..3], 4, 0.5);
    assert_eq!((s.chosen.len(), s.shortfall), (3, 1));
    assert_eq!(near_count(4, 0.45), 1);
    assert_eq!(near_count(4, 0.5), 2);
    assert_eq!(near_count(10, 0.3), 3);
}

// Full sort, then membership by rank.
fn oracle(d: &[f64], k: usize, rho: f64) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = d.iter().copied().zip(0..).collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let near = (rho * k as f64 + 1e-9).floor() as usize;
    let n = d.len();
    let mut out: Vec<usize> = ranked
        .iter()
        .enumerate()
        .filter(|(rank, _)| *rank < near || *rank >= n - (k - near))
        .map(|(_, x)| x.1)
        .collect();
    out.sort();
    out
}

proptest! {
    #[test]
    fn hybrid_selection_matches_full_sort(
        raw in proptest::collection::vec(0u8..20, 1..200),
        k_frac in 0.0f64..1.0,
        rho_pick in 0usize..4,
    ) {
        // small integer distances so ties are frequent
        let d: Vec<f64> = raw.iter().map(|&v| v as f64 * 0.5).collect();
        let k = ((d.len() as f64 * k_frac) as usize).max(1);
        let rho = [0.0, 0.45, 0.5, 1.0][rho_pick];
        let mut got = select_hybrid(&d, k, rho).chosen;
        prop_assert_eq!(got.len(), k);
        got.sort();
        prop_assert_eq!(got, oracle(&d, k, rho));
    }

    #[test]
    fn quotas_sum_to_capacity(capacity in 0usize..2000, classes in 1usize..50) {
        let q = quota(capacity, classes);
        prop_assert_eq!(q.iter().sum::<usize>(), capacity);
        prop_assert!(q.iter().max().unwrap() - q.iter().min().unwrap() <= 1);
    }

    #[test]
    fn allocation_respects_supply(capacity in 0usize..400, avail in proptest::collection::vec(0usize..120, 1..12)) {
        let t = allocate(capacity, &avail);
        let total: usize = avail.iter().sum();
        prop_assert_eq!(t.iter().sum::<usize>(), capacity.min(total));
        for (a, b) in t.iter().zip(&avail) {
            prop_assert!(a <= b);
        }
        // groups that are not supply-bound stay within one slot of each other
        let free: Vec<usize> = t.iter().zip(&avail).filter(|(a, b)| a < b).map(|(a, _)| *a).collect();
        if let (Some(lo), Some(hi)) = (free.iter().min(), t.iter().max()) {
            prop_assert!(hi - lo <= 1);
        }
    }
}

fn class_incremental_run(policy: Policy, seed: u64) -> Vec<ReplayBuffer> {
    let tasks: [&[usize]; 3] = [&[0, 1, 2], &[3, 4], &[5, 6]];
    let mut snapshots = Vec::new();
    let mut buf = ReplayBuffer::new(CAPACITY, policy, true, seed);
    let mut classes = 0;
    let mut id = 0;
    for (t, set) in tasks.iter().enumerate() {
        classes += set.len();
        let labels: Vec<usize> = set.iter().flat_map(|&c| std::iter::repeat(c).take(150)).collect();
        let mut ws = windows(&labels, 10 + t as u64);
        for w in &mut ws {
            w.id = id;
            id += 1;
        }
        let model = tiny_model(classes);
        match policy {
            Policy::Uniform => buf.update_uniform(&refs(&ws), Target::FaultType, t, &model).unwrap(),
            Policy::PrototypeAware => {
                let feats = model.extract_features(&ws, WINDOW).unwrap();
                let mut bank = BTreeMap::new();
                for &c in set.iter() {
                    let members: Vec<&Vec<f32>> = feats.iter().zip(&ws).filter(|(_, w)| w.fault_type == c).map(|(f, _)| f).collect();
                    let dim = members[0].len();
                    let mean: Vec<f32> = (0..dim).map(|k| members.iter().map(|f| f[k]).sum::<f32>() / members.len() as f32).collect();
                    bank.insert(c, mean);
                }
                for e in buf.entries() {
                    bank.entry(e.label).or_insert_with(|| vec![0.0; 6]);
                }
                buf.update_prototype_aware(&refs(&ws), Target::FaultType, t, &model, &bank, 0.45).unwrap();
            }
        }
        snapshots.push(buf.clone());
    }
    snapshots
}

#[test]
fn buffer_stays_full_and_balanced() {
    for policy in [Policy::Uniform, Policy::PrototypeAware] {
        let snaps = class_incremental_run(policy, 5);
        for (t, b) in snaps.iter().enumerate() {
            assert_eq!(b.len(), CAPACITY, "task {t}");
            let counts: Vec<usize> = b.class_counts().values().copied().collect();
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
        let last = &snaps[2];
        assert_eq!(last.class_counts().len(), 7);
        // logit width is the head size at insertion
        for e in last.entries() {
            let width = [3, 5, 7][e.task];
            assert_eq!(e.logits.as_ref().unwrap().len(), width);
        }
    }
}

#[test]
fn first_task_fills_to_quota() {
    let snaps = class_incremental_run(Policy::Uniform, 6);
    let counts = snaps[0].class_counts();
    assert_eq!(counts.values().copied().collect::<Vec<_>>(), vec![121, 121, 121]);
}

#[test]
fn same_seed_same_buffer() {
    for policy in [Policy::Uniform, Policy::PrototypeAware] {
        let a = class_incremental_run(policy, 9);
        let b = class_incremental_run(policy, 9);
        assert_eq!(a[2].entries(), b[2].entries());
    }
    let a = class_incremental_run(Policy::Uniform, 9);
    let c = class_incremental_run(Policy::Uniform, 10);
    assert_ne!(a[2].entries(), c[2].entries());
}

#[test]
fn domain_tasks_keep_every_zone() {
    let mut buf = ReplayBuffer::new(40, Policy::Uniform, false, 0);
    let model = tiny_model(2);
    for task in 0..4 {
        let labels: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let mut ws = windows(&labels, task as u64);
        for w in &mut ws {
            w.zone = task;
            w.id += 100 * task;
        }
        buf.update_uniform(&refs(&ws), Target::FaultType, task, &model).unwrap();
        assert_eq!(buf.len(), 40);
    }
    let groups = buf.group_counts();
    assert_eq!(groups.len(), 8);
    assert!(groups.values().all(|&n| n == 5));
}

#[test]
fn window_at_prototype_is_always_kept() {
    let model = tiny_model(1);
    let ws = windows(&[0; 20], 21);
    let feats = model.extract_features(&ws, WINDOW).unwrap();
    for pick in [0, 7, 19] {
        let mut bank = BTreeMap::new();
        bank.insert(0usize, feats[pick].clone());
        let mut buf = ReplayBuffer::new(5, Policy::PrototypeAware, true, 0);
        buf.update_prototype_aware(&refs(&ws), Target::FaultType, 0, &model, &bank, 0.45).unwrap();
        assert!(buf.entries().iter().any(|e| e.window.id == pick));
        assert_eq!(buf.len(), 5);
    }
}

#[test]
fn six_candidate_selection_matches_oracle() {
    let model = tiny_model(1);
    let ws = windows(&[0; 6], 22);
    let feats = model.extract_features(&ws, WINDOW).unwrap();
    let proto: Vec<f32> = (0..feats[0].len()).map(|k| feats.iter().map(|f| f[k]).sum::<f32>() / 6.0).collect();
    let d: Vec<f64> = feats
        .iter()
        .map(|f| f.iter().zip(&proto).map(|(a, b)| ((a - b) as f64).powi(2)).sum())
        .collect();
    let mut bank = BTreeMap::new();
    bank.insert(0usize, proto);
    let mut buf = ReplayBuffer::new(4, Policy::PrototypeAware, false, 0);
    buf.update_prototype_aware(&refs(&ws), Target::FaultType, 0, &model, &bank, 0.45).unwrap();
    let mut got: Vec<usize> = buf.entries().iter().map(|e| e.window.id).collect();
    got.sort();
    assert_eq!(got, oracle(&d, 4, 0.45));
}

#[test]
fn missing_prototype_is_internal_state_error() {
    let model = tiny_model(2);
    let ws = windows(&[0, 1, 1], 23);
    let bank: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
    let mut buf = ReplayBuffer::new(4, Policy::PrototypeAware, false, 0);
    let err = buf.update_prototype_aware(&refs(&ws), Target::FaultType, 0, &model, &bank, 0.5);
    assert!(matches!(err, Err(Error::InternalState(_))));
}

#[test]
fn small_stream_is_kept_whole() {
    let model = tiny_model(2);
    let ws = windows(&[0, 1, 1], 24);
    let mut buf = ReplayBuffer::new(10, Policy::Uniform, true, 0);
    buf.update_uniform(&refs(&ws), Target::FaultType, 0, &model).unwrap();
    assert_eq!(buf.len(), 3);
}

#[test]
fn memory_accounting_arithmetic() {
    assert_eq!(WINDOW_BYTES, 2448);
    let er = MemoryAccounting::nominal(363, None, 0);
    assert_eq!(er.total_bytes, 891_528);
    let der = MemoryAccounting::nominal(363, Some(11), 0);
    assert_eq!(der.total_bytes, 907_500);
    assert!((der.total_kib - 886.23).abs() < 0.005);
    let proder = MemoryAccounting::nominal(363, Some(11), 11);
    assert_eq!(proder.total_bytes - der.total_bytes, 13_200);
}

#[test]
fn accounting_counts_actual_logit_widths() {
    let snaps = class_incremental_run(Policy::Uniform, 1);
    let b = &snaps[2];
    let acc = memory_bytes(b, 7);
    let logits: usize = b.entries().iter().map(|e| e.logits.as_ref().unwrap().len()).sum();
    assert_eq!(acc.total_bytes, 363 * 2456 + 4 * logits + 7 * 1200);
    assert_eq!(b.dump().len(), 363);
}

#[test]
fn replay_draws_are_distinct_and_uniform() {
    let ws = windows(&[0; 40], 25);
    let mut buf = ReplayBuffer::new(40, Policy::Uniform, false, 0);
    buf.update_uniform(&refs(&ws), Target::FaultType, 0, &tiny_model(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut freq = vec![0usize; 40];
    let draws = 10_000;
    for _ in 0..draws / 2 {
        let pair = buf.sample(2, &mut rng);
        assert_ne!(pair[0].window.id, pair[1].window.id);
        for e in pair {
            freq[e.window.id] += 1;
        }
    }
    let p = 1.0 / 40.0;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for f in freq {
        assert!((f as f64 - mean).abs() <= 3.5 * sd, "count {f} vs {mean}");
    }
}
