mod common;

use mtdgrid::adversarial::{attack_indices, cai, collect_successful, objective, objective_gradient, AdvConfig, SparsityMask};
use mtdgrid::attack::{sample_attacked, AttackConfig};
use mtdgrid::seed;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn successful_attacks_evade_both_detectors_and_replay_exactly() {
    let sys = common::system14(21);
    let model = common::small_model(&sys, 21);
    let attack = AttackConfig::new(0.05, 14).unwrap();
    let (adv, used) = collect_successful(&sys, &model, &attack, &AdvConfig::default(), 4, "it", 10, 200).unwrap();
    assert_eq!(adv.len(), 10, "used {used}");
    for s in &adv {
        assert_eq!(model.predict(&s.result.z_adv).unwrap(), 0);
        assert!(!sys.bdd_alarm(&s.result.z_adv).unwrap());
        let r0 = sys.residual(&s.attacked.z_a).unwrap();
        assert!((sys.residual(&s.result.z_adv).unwrap() - r0).abs() <= 1e-9 * r0.max(1.0));
        for (i, d) in s.result.delta_c.iter().enumerate() {
            if !s.attacked.attack.support.contains(&i) {
                assert_eq!(*d, 0.0);
            }
        }
        let z = s.replay(&sys).unwrap();
        for (a, b) in z.iter().zip(&s.result.z_adv) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((s.cai - cai(&s.attacked.attack.a, &s.result.delta).unwrap()).abs() < 1e-15);
    }
}

#[test]
fn attack_batches_are_deterministic() {
    let sys = common::system14(22);
    let model = common::small_model(&sys, 22);
    let attack = AttackConfig::new(0.1, 14).unwrap();
    let cfg = AdvConfig { rounds: 2, iterations: 40, ..AdvConfig::default() };
    let a = attack_indices(&sys, &model, &attack, &cfg, 3, "det", 0..6).unwrap();
    let b = attack_indices(&sys, &model, &attack, &cfg, 3, "det", 0..6).unwrap();
    assert_eq!(a, b);
}

#[test]
fn objective_gradient_matches_central_differences() {
    let sys = common::system14(23);
    let model = common::small_model(&sys, 23);
    let attack = AttackConfig::new(0.2, 14).unwrap();
    let mut rng = seed::rng(5);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for probe in 0..100 {
        let s = sample_attacked(&sys, &attack, 6, "grad", probe).unwrap();
        let mask = SparsityMask::from_support(13, &s.attack.support);
        let d: Vec<f64> = (0..13).map(|_| rng.random_range(-0.05..0.05)).collect();
        let lambda = rng.random_range(0.1..10.0);
        let (_, g) = objective_gradient(&model, sys.jacobian(), &s.z_a, &d, &mask, lambda).unwrap();
        let i = s.attack.support[rng.random_range(0..s.attack.support.len())];
        let (mut p, mut q) = (d.clone(), d.clone());
        p[i] += h;
        q[i] -= h;
        let f = |v: &[f64]| objective(&model, sys.jacobian(), &s.z_a, v, &mask, lambda).unwrap();
        let fd = (f(&p) - f(&q)) / (2.0 * h);
        worst = worst.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-3));
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

proptest! {
    #[test]
    fn cai_is_scale_invariant_and_one_without_delta(a in prop::collection::vec(-5.0f64..5.0, 1..20), k in 0.1f64..10.0) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-6));
        let zero = vec![0.0; a.len()];
        prop_assert!((cai(&a, &zero).unwrap() - 1.0).abs() < 1e-12);
        let d: Vec<f64> = a.iter().map(|v| -0.5 * v).collect();
        prop_assert!((cai(&a, &d).unwrap() - 0.5).abs() < 1e-12);
        let (ak, dk): (Vec<f64>, Vec<f64>) = a.iter().zip(&d).map(|(x, y)| (k * x, k * y)).unzip();
        prop_assert!((cai(&ak, &dk).unwrap() - cai(&a, &d).unwrap()).abs() < 1e-12);
    }
}
