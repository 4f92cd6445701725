// End-to-end through the public API on a small synthetic dataset.

use proder_core::data::{build_scenario, dataset_hash, generate_synthetic, DatasetSplit, GeneratorConfig, TRAIN_FRACTION};
use proder_core::eval::{compute_gap, run_cell};
use proder_core::replay::{allocate, quota, select_hybrid, MemoryAccounting};
use proder_core::strategies::{Method, StrategyConfig};
use proptest::prelude::*;

fn small() -> (DatasetSplit, String) {
    let rows = generate_synthetic(&GeneratorConfig {
        rows_per_cell: 30,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let hash = dataset_hash(&rows);
    (DatasetSplit::build(&rows, TRAIN_FRACTION, 0).unwrap(), hash)
}

fn quick(scenario: u8) -> StrategyConfig {
    StrategyConfig {
        epochs: 1,
        buffer_capacity: 20,
        ..StrategyConfig::for_scenario(scenario)
    }
}

#[test]
fn every_method_produces_a_consistent_result() {
    let (split, hash) = small();
    let sc = build_scenario(&split, 4).unwrap();
    let cfg = quick(4);
    let joint = run_cell(Method::Joint, &split, &sc, &cfg, 3, None, &hash, serde_json::Value::Null).unwrap();
    assert_eq!(joint.gap, 0.0);
    for m in Method::ALL.into_iter().filter(|&m| m != Method::Joint) {
        let r = run_cell(m, &split, &sc, &cfg, 3, Some(joint.final_acc), &hash, serde_json::Value::Null).unwrap();
        assert_eq!(r.matrix.tasks(), sc.plan.tasks.len(), "{m}");
        assert!((0.0..=1.0).contains(&r.final_acc));
        assert_eq!(r.gap, compute_gap(r.final_acc, joint.final_acc));
        assert_eq!(r.memory.is_some(), m.uses_buffer(), "{m}");
        if let Some(mem) = &r.memory {
            assert!(mem.entries <= cfg.buffer_capacity);
        }
        assert!(r.final_epoch_loss.iter().all(|l| l.is_finite()));
    }
}

#[test]
fn same_seed_same_result() {
    let (split, hash) = small();
    let sc = build_scenario(&split, 1).unwrap();
    let cfg = quick(1);
    let run = || {
        run_cell(Method::Proder, &split, &sc, &cfg, 9, Some(1.0), &hash, serde_json::Value::Null).unwrap()
    };
    let (mut a, mut b) = (run(), run());
    a.wall_clock_secs = 0.0;
    b.wall_clock_secs = 0.0;
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

proptest! {
    #[test]
    fn quotas_fill_capacity(capacity in 0usize..1000, classes in 1usize..40) {
        let q = quota(capacity, classes);
        prop_assert_eq!(q.iter().sum::<usize>(), capacity);
        prop_assert!(q.iter().max().unwrap() - q.iter().min().unwrap() <= 1);
    }

    #[test]
    fn allocation_respects_supply(capacity in 0usize..500, available in prop::collection::vec(0usize..80, 1..12)) {
        let got = allocate(capacity, &available);
        let supply: usize = available.iter().sum();
        prop_assert_eq!(got.iter().sum::<usize>(), capacity.min(supply));
        for (g, a) in got.iter().zip(&available) {
            prop_assert!(g <= a);
        }
    }

    #[test]
    fn selection_size_and_uniqueness(d in prop::collection::vec(0.0f64..5.0, 0..60), k in 0usize..70, rho in 0.0f64..=1.0) {
        let s = select_hybrid(&d, k, rho);
        prop_assert_eq!(s.chosen.len(), k.min(d.len()));
        prop_assert_eq!(s.shortfall, k.saturating_sub(d.len()));
        let mut c = s.chosen.clone();
        c.sort_unstable();
        c.dedup();
        prop_assert_eq!(c.len(), s.chosen.len());
    }

    #[test]
    fn memory_is_linear_in_parts(n in 0usize..400, logits in prop::option::of(1usize..12), protos in 0usize..12) {
        let m = MemoryAccounting::nominal(n, logits, protos);
        let base = MemoryAccounting::nominal(n, logits, 0);
        prop_assert_eq!(m.total_bytes - base.total_bytes, protos * 1200);
        prop_assert!((m.total_kib - m.total_bytes as f64 / 1024.0).abs() < 1e-9);
    }
}
