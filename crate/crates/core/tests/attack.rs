mod common;

use mtdgrid::attack::{build_dataset, sample_attacked, AttackConfig, Dataset};
use mtdgrid::estimation::Provenance;
use proptest::prelude::*;

#[test]
fn replay_on_the_generating_system_reproduces_the_measurement() {
    let sys = common::system14(2);
    let cfg = AttackConfig::new(0.1, 14).unwrap();
    for i in 0..20 {
        let s = sample_attacked(&sys, &cfg, 5, "replay", i).unwrap();
        let again = s.replay(&sys).unwrap();
        for (a, b) in again.iter().zip(&s.z_a) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn replay_under_new_reactances_keeps_noise_and_injection() {
    let sys = common::system14(2);
    let mut x = sys.reactances().to_vec();
    for l in sys.topology().dfacts() {
        x[*l] *= 1.3;
    }
    let other = sys.with_reactances(&x).unwrap();
    let s = sample_attacked(&sys, &AttackConfig::new(0.1, 14).unwrap(), 5, "replay", 0).unwrap();
    let z = s.replay(&other).unwrap();
    let clean = s.clean.remeasure(&other).unwrap();
    for i in 0..z.len() {
        assert!((z[i] - clean[i] - s.attack.a[i]).abs() < 1e-12);
    }
    assert!(z.iter().zip(&s.z_a).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn dataset_file_round_trip() {
    let sys = common::system14(3);
    let data = build_dataset(&sys, &AttackConfig::new(0.05, 14).unwrap(), 30, 20, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    data.write(&path).unwrap();
    let back = Dataset::read(&path).unwrap();
    assert_eq!(back, data);
    assert_eq!((back.count_label(0), back.count_label(1)), (30, 20));
    assert!(back.rows.iter().all(|r| (r.label == 1) == (r.provenance == Provenance::Fdia)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn attacks_are_sparse_column_space_vectors(s in any::<u64>(), nu in 0.01f64..0.5) {
        let sys = common::system14(4);
        let cfg = AttackConfig::new(nu, 14).unwrap();
        let a = sample_attacked(&sys, &cfg, s, "prop", 0).unwrap();
        let rec = &a.attack;
        prop_assert!(!rec.support.is_empty());
        for (i, c) in rec.c.iter().enumerate() {
            if !rec.support.contains(&i) {
                prop_assert_eq!(*c, 0.0);
            }
        }
        let hc = sys.jacobian().apply(&rec.c);
        for (x, y) in hc.iter().zip(&rec.a) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!(!sys.bdd_alarm(&a.z_a).unwrap());
    }
}
