use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn row(v: f32, fault_type: usize, zone: usize) -> SampleRow {
    SampleRow {
        features: vec![v; FEATURES],
        fault_type,
        zone,
        resistance_id: 0,
    }
}

fn small_config(rows_per_cell: usize) -> GeneratorConfig {
    GeneratorConfig {
        rows_per_cell,
        ..GeneratorConfig::default()
    }
}

#[test]
fn zscore_constant_column_maps_to_zero() {
    let rows: Vec<SampleRow> = (0..3).map(|_| row(1.0, 0, 0)).collect();
    let (out, stats) = zscore_fit_apply(&rows).unwrap();
    assert!(out.iter().all(|r| r.features.iter().all(|v| *v == 0.0)));
    assert_eq!(stats.constant_columns().len(), FEATURES);
}

#[test]
fn zscore_two_points_are_symmetric() {
    let rows = vec![row(0.0, 0, 0), row(2.0, 0, 0)];
    let (out, stats) = zscore_fit_apply(&rows).unwrap();
    assert!(out[0].features.iter().all(|v| *v == -1.0));
    assert!(out[1].features.iter().all(|v| *v == 1.0));
    assert!(stats.constant_columns().is_empty());
}

#[test]
fn zscore_of_empty_input_is_data_error() {
    assert!(matches!(zscore_fit_apply(&[]), Err(Error::Data(_))));
}

#[test]
fn zscore_random_table_recomputed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<SampleRow> = (0..100)
        .map(|_| SampleRow {
            features: (0..FEATURES).map(|j| rng.gen_range(-5.0..5.0) * (j + 1) as f32 + j as f32).collect(),
            fault_type: 0,
            zone: 0,
            resistance_id: 0,
        })
        .collect();
    let (out, _) = zscore_fit_apply(&rows).unwrap();
    for j in 0..FEATURES {
        let col: Vec<f64> = out.iter().map(|r| r.features[j] as f64).collect();
        let mean = col.iter().sum::<f64>() / 100.0;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0).sqrt();
        assert!(mean.abs() <= 1e-5, "column {j} mean {mean}");
        assert!((std - 1.0).abs() <= 1e-5, "column {j} std {std}");
    }
}

#[test]
fn window_counts_for_sample_sizes() {
    assert_eq!(window_count(100), 15);
    assert_eq!(window_count(12), 1);
    assert_eq!(window_count(11), 0);
    assert_eq!(window_count(0), 0);
}

#[test]
fn window_count_matches_enumeration() {
    for n in 0..=200 {
        let trimmed = n - n % 12;
        let mut count = 0;
        let mut start = 0;
        while start + 12 <= trimmed {
            count += 1;
            start += 6;
        }
        assert_eq!(window_count(n), count, "n = {n}");
    }
}

#[test]
fn windowize_keeps_labels_pure_and_order_coherent() {
    // interleave two groups; windows must still come out per group, in row order
    let mut rows = Vec::new();
    for t in 0..30 {
        rows.push(row(t as f32, 1, 2));
        rows.push(row(100.0 + t as f32, 0, 3));
    }
    let windows = windowize(&rows);
    assert_eq!(windows.len(), 2 * window_count(30));
    for w in &windows {
        let firsts: Vec<f32> = w.data.chunks(FEATURES).map(|r| r[0]).collect();
        assert!(firsts.windows(2).all(|p| p[1] == p[0] + 1.0));
        let group = if w.fault_type == 0 { (0, 3, 100.0) } else { (1, 2, 0.0) };
        assert_eq!((w.fault_type, w.zone), (group.0, group.1));
        assert!(firsts[0] >= group.2 && firsts[0] < group.2 + 30.0);
    }
    assert_eq!(windows[0].fault_type, 0);
}

#[test]
fn generator_is_deterministic_with_exact_marginals() {
    let cfg = small_config(36);
    let a = generate_synthetic(&cfg).unwrap();
    let b = generate_synthetic(&cfg).unwrap();
    assert_eq!(a, b);
    let mut counts = vec![vec![0usize; ZONES]; FAULT_TYPES];
    for r in &a {
        counts[r.fault_type][r.zone] += 1;
        assert!(r.validate().is_ok());
    }
    assert!(counts.iter().flatten().all(|&c| c == 36));
    let other = generate_synthetic(&GeneratorConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn generator_rejects_empty_cells() {
    let mut counts = vec![vec![24; ZONES]; FAULT_TYPES];
    counts[4][1] = 0;
    let cfg = GeneratorConfig {
        counts: Some(counts),
        ..GeneratorConfig::default()
    };
    assert!(matches!(generate_synthetic(&cfg), Err(Error::Parameter(_))));
    assert!(generate_synthetic(&small_config(0)).is_err());
}

// Centroids from even 12-row runs, accuracy on odd runs.
fn nearest_centroid(rows: &[SampleRow], key: fn(&SampleRow) -> usize, k: usize) -> f64 {
    let mut cent = vec![vec![0.0f64; FEATURES]; k];
    let mut n = vec![0.0f64; k];
    for (i, r) in rows.iter().enumerate() {
        if (i / 12) % 2 == 0 {
            n[key(r)] += 1.0;
            for (c, v) in cent[key(r)].iter_mut().zip(&r.features) {
                *c += *v as f64;
            }
        }
    }
    for (c, m) in cent.iter_mut().zip(&n) {
        c.iter_mut().for_each(|v| *v /= m);
    }
    let (mut hit, mut total) = (0, 0);
    for (i, r) in rows.iter().enumerate() {
        if (i / 12) % 2 == 1 {
            let dist = |c: &Vec<f64>| -> f64 { c.iter().zip(&r.features).map(|(m, v)| (m - *v as f64).powi(2)).sum() };
            let mut best = 0;
            for c in 1..k {
                if dist(&cent[c]) < dist(&cent[best]) {
                    best = c;
                }
            }
            hit += usize::from(best == key(r));
            total += 1;
        }
    }
    hit as f64 / total as f64
}

#[test]
fn default_generator_lands_in_separability_band() {
    let rows = generate_synthetic(&GeneratorConfig::default()).unwrap();
    let acc = nearest_centroid(&rows, |r| r.fault_type, FAULT_TYPES);
    assert!((0.4..=0.9).contains(&acc), "nearest-centroid accuracy {acc}");
}

#[test]
fn default_split_sizes() {
    let rows = generate_synthetic(&GeneratorConfig::default()).unwrap();
    let split = DatasetSplit::build(&rows, TRAIN_FRACTION, 0).unwrap();
    assert_eq!(split.train.len(), 44 * 36);
    assert_eq!(split.test.len(), 44 * 9);
    let ids: Vec<usize> = split.train.iter().map(|w| w.id).collect();
    assert_eq!(ids, (0..split.train.len()).collect::<Vec<_>>());
}

#[test]
fn split_is_stratified_and_seeded() {
    let rows = generate_synthetic(&small_config(96)).unwrap();
    let split = DatasetSplit::build(&rows, 0.8, 4).unwrap();
    let per = window_count(96);
    for f in 0..FAULT_TYPES {
        for z in 0..ZONES {
            let n = split.train.iter().filter(|w| w.fault_type == f && w.zone == z).count();
            let expect = 0.8 * per as f64;
            assert!((n as f64 - expect).abs() <= 1.0);
        }
    }
    let again = DatasetSplit::build(&rows, 0.8, 4).unwrap();
    assert_eq!(split.train, again.train);
    assert_eq!(split.test, again.test);
    let other = DatasetSplit::build(&rows, 0.8, 5).unwrap();
    assert_ne!(split.train, other.train);
}

#[test]
fn test_rows_never_touch_normalization() {
    let rows = generate_synthetic(&small_config(48)).unwrap();
    let split = DatasetSplit::build(&rows, 0.5, 1).unwrap();
    // rows that appear only in test windows
    let train_rows = row_keys(&split.train);
    let mut poisoned = rows.clone();
    let mut changed = 0;
    for r in poisoned.iter_mut() {
        let key = normalized_key(&r.features, &split.normalization);
        if !train_rows.contains(&key) {
            r.features.iter_mut().for_each(|v| *v += 1000.0);
            changed += 1;
        }
    }
    assert!(changed > 0);
    let again = DatasetSplit::build(&poisoned, 0.5, 1).unwrap();
    assert_eq!(again.normalization, split.normalization);
}

fn normalized_key(features: &[f32], stats: &ZScore) -> Vec<u32> {
    let mut v = features.to_vec();
    stats.apply(&mut v);
    v.iter().map(|x| x.to_bits()).collect()
}

fn row_keys(windows: &[TimeWindow]) -> BTreeSet<Vec<u32>> {
    windows
        .iter()
        .flat_map(|w| w.data.chunks(FEATURES).map(|r| r.iter().map(|x| x.to_bits()).collect::<Vec<u32>>()))
        .collect()
}

#[test]
fn windows_after_split_are_normalized_and_pure() {
    let rows = generate_synthetic(&small_config(60)).unwrap();
    let split = DatasetSplit::build(&rows, 0.8, 2).unwrap();
    for w in split.train.iter().chain(&split.test) {
        assert_eq!(w.data.len(), WINDOW * FEATURES);
        assert!(w.data.iter().all(|v| v.is_finite() && v.abs() < 20.0));
    }
}

fn sets(scn: &Scenario) -> Vec<BTreeSet<usize>> {
    scn.plan
        .tasks
        .iter()
        .map(|t| t.classes.iter().copied().collect())
        .collect()
}

fn bs(v: &[usize]) -> BTreeSet<usize> {
    v.iter().copied().collect()
}

#[test]
fn scenario_partitions() {
    let rows = generate_synthetic(&small_config(36)).unwrap();
    let split = DatasetSplit::build(&rows, 0.8, 0).unwrap();

    let s1 = build_scenario(&split, 1).unwrap();
    assert_eq!(
        sets(&s1),
        vec![bs(&[0, 1, 2]), bs(&[3, 4]), bs(&[5, 6]), bs(&[7, 8]), bs(&[9, 10])]
    );
    let s2 = build_scenario(&split, 2).unwrap();
    let mut expect = vec![bs(&[0, 1, 2])];
    expect.extend((3..11).map(|c| bs(&[c])));
    assert_eq!(sets(&s2), expect);
    let s3 = build_scenario(&split, 3).unwrap();
    assert_eq!(s3.plan.tasks.len(), 4);
    for (z, t) in s3.plan.tasks.iter().enumerate() {
        assert_eq!(bs(&t.classes), (0..11).collect());
        assert_eq!(t.zones, Some(vec![z]));
    }
    let s4 = build_scenario(&split, 4).unwrap();
    assert_eq!(s4.plan.target, Target::Zone);
    assert_eq!(sets(&s4), vec![bs(&[0, 1]), bs(&[2]), bs(&[3])]);
    assert!(matches!(build_scenario(&split, 5), Err(Error::Parameter(_))));
    assert!(matches!(build_scenario(&split, 0), Err(Error::Parameter(_))));
}

#[test]
fn task_streams_partition_the_train_set() {
    let rows = generate_synthetic(&small_config(36)).unwrap();
    let split = DatasetSplit::build(&rows, 0.8, 0).unwrap();
    for id in 1..=4 {
        let scn = build_scenario(&split, id).unwrap();
        let mut union = BTreeSet::new();
        for (t, stream) in scn.train_streams.iter().enumerate() {
            assert!(!stream.is_empty());
            for &i in stream {
                assert!(union.insert(i), "window {i} in two tasks of scenario {id}");
                assert!(scn.plan.tasks[t].admits(scn.plan.target, &split.train[i]));
                if id == 3 {
                    assert_eq!(split.train[i].zone, t);
                }
            }
        }
        assert_eq!(union, (0..split.train.len()).collect());
        let tested: usize = scn.test_subsets.iter().map(Vec::len).sum();
        assert_eq!(tested, split.test.len());
    }
}

#[test]
fn class_sets_are_disjoint_and_exhaustive() {
    for id in [1u8, 2, 4] {
        let plan = ScenarioPlan::new(id).unwrap();
        let mut seen = BTreeSet::new();
        for (t, task) in plan.tasks.iter().enumerate() {
            for c in &task.classes {
                assert!(seen.insert(*c));
            }
            assert_eq!(plan.new_classes(t), task.classes);
        }
        assert_eq!(seen, (0..plan.total_classes()).collect());
        assert!(plan.class_incremental());
    }
    let s3 = ScenarioPlan::new(3).unwrap();
    assert_eq!(s3.new_classes(0).len(), 11);
    assert!(s3.new_classes(1).is_empty());
    assert_eq!(s3.classes_through(3), 11);
}

fn header() -> String {
    let mut h: Vec<String> = (0..FEATURES).map(|j| format!("c{j}")).collect();
    h.push("fault_type".into());
    h.push("zone".into());
    h.join(",")
}

#[test]
fn csv_single_row() {
    let line = vec!["0.5"; FEATURES].join(",");
    let text = format!("{}\n{line},3,1\n", header());
    let rows = read_csv(text.as_bytes()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].fault_type, 3);
    assert_eq!(rows[0].zone, 1);
    assert_eq!(rows[0].resistance_id, 0);
    assert!(rows[0].features.iter().all(|v| *v == 0.5));
}

#[test]
fn csv_rejects_out_of_range_label_with_row() {
    let line = vec!["0"; FEATURES].join(",");
    let text = format!("{}\n{line},3,1\n{line},11,1\n", header());
    match read_csv(text.as_bytes()) {
        Err(Error::DataRow { row, .. }) => assert_eq!(row, 2),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn csv_rejects_bad_cells_and_columns() {
    let mut cells = vec!["0"; FEATURES];
    cells[7] = "abc";
    let text = format!("{}\n{},0,0\n", header(), cells.join(","));
    assert!(matches!(read_csv(text.as_bytes()), Err(Error::DataRow { row: 1, .. })));
    let short: Vec<String> = (0..FEATURES).map(|j| format!("c{j}")).collect();
    let text = format!("{},zone\n{},0\n", short.join(","), vec!["0"; FEATURES].join(","));
    assert!(matches!(read_csv(text.as_bytes()), Err(Error::Data(_))));
}

#[test]
fn csv_round_trip() {
    let rows = generate_synthetic(&small_config(24)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    save_csv(&rows, &path).unwrap();
    assert_eq!(load_csv(&path).unwrap(), rows);
}

proptest! {
    #[test]
    fn windows_never_mix_groups(sizes in proptest::collection::vec(0usize..40, 1..6)) {
        let mut rows = Vec::new();
        for (g, &n) in sizes.iter().enumerate() {
            for t in 0..n {
                rows.push(row(t as f32, g % FAULT_TYPES, g / FAULT_TYPES));
            }
        }
        let windows = windowize(&rows);
        let expected: usize = sizes.iter().map(|&n| window_count(n)).sum();
        prop_assert_eq!(windows.len(), expected);
        for w in &windows {
            // consecutive source rows of a single group
            let firsts: Vec<f32> = w.data.chunks(FEATURES).map(|r| r[0]).collect();
            prop_assert!(firsts.windows(2).all(|p| p[1] == p[0] + 1.0));
        }
    }
}

#[test]
fn dataset_hash_tracks_content() {
    let rows = generate_synthetic(&small_config(24)).unwrap();
    let h = dataset_hash(&rows);
    assert_eq!(h.len(), 64);
    assert_eq!(h, dataset_hash(&rows.clone()));
    let mut other = rows.clone();
    other[5].features[3] += 1e-3;
    assert_ne!(h, dataset_hash(&other));
}
