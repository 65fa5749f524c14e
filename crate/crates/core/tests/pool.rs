mod common;

use mtdgrid::pool::{build_pool, load_pool, save_pool, transferability_from_labels, vote_labels, vote_threshold, AdvTrainBudget, PoolConfig};
use proptest::prelude::*;

fn tiny_config(k: usize, p: usize) -> PoolConfig {
    let mut c = PoolConfig {
        k,
        p,
        samples_per_class: 120,
        adv_budget: AdvTrainBudget { rounds: 1, samples_per_round: 20, epochs: 2 },
        seed: 99,
        ..PoolConfig::default()
    };
    c.retrain.epochs = 3;
    c.adv.rounds = 2;
    c.adv.iterations = 30;
    c
}

#[test]
fn smaller_pools_are_prefixes_of_larger_ones() {
    let sys = common::system14(31);
    let base = common::small_model(&sys, 31);
    let small = build_pool(&base, &sys, &tiny_config(2, 1), 0).unwrap();
    let large = build_pool(&base, &sys, &tiny_config(3, 1), 0).unwrap();
    assert_eq!(small.students[..], large.students[..2]);
    let next = build_pool(&base, &sys, &tiny_config(2, 1), 1).unwrap();
    assert_ne!(next.students[0].model, small.students[0].model);
    assert!(small.students[0].provenance.hardened && !small.students[1].provenance.hardened);
}

#[test]
fn pool_directory_round_trip() {
    let sys = common::system14(32);
    let base = common::small_model(&sys, 32);
    let pool = build_pool(&base, &sys, &tiny_config(3, 1), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_pool(&pool, dir.path()).unwrap();
    let back = load_pool(dir.path()).unwrap();
    assert_eq!(back.k(), 3);
    assert_eq!(back.generation, 2);
    for (a, b) in back.students.iter().zip(&pool.students) {
        assert_eq!(a.model, b.model);
        assert_eq!(a.provenance.hardened, b.provenance.hardened);
    }
}

proptest! {
    #[test]
    fn majority_vote_matches_count(labels in prop::collection::vec(0u8..2, 1..15)) {
        let ones = labels.iter().filter(|l| **l == 1).count();
        prop_assert_eq!(vote_labels(&labels) == 1, ones >= vote_threshold(labels.len()));
        prop_assert!(vote_threshold(labels.len()) * 2 >= labels.len());
    }

    #[test]
    fn transferability_rates_are_probabilities(bits in prop::collection::vec(prop::collection::vec(0u8..2, 12), 2..6)) {
        let t = transferability_from_labels(&bits).unwrap();
        prop_assert!((0.0..=1.0).contains(&t.eta_av) || t.eta_av.is_nan());
        for (i, row) in t.eta.iter().enumerate() {
            for v in row.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(v));
            }
            prop_assert_eq!(row.iter().all(|v| v.is_none()), t.excluded.contains(&i));
        }
    }
}
