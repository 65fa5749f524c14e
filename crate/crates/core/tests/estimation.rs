mod common;

use approx::assert_relative_eq;
use mtdgrid::estimation::{wls_estimate, StateEstimator};
use mtdgrid::grid::GridTopology;
use mtdgrid::seed;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn column_space_injections_leave_the_residual_unchanged(s in any::<u64>(), scale in 1e-3f64..1.0) {
        let sys = common::system14(1);
        let mut rng = seed::rng(s);
        let (_, z) = sys.sample_clean(&mut rng).unwrap();
        let c: Vec<f64> = (0..13).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let a = sys.jacobian().apply(&c);
        let za: Vec<f64> = z.z.iter().zip(&a).map(|(x, y)| x + y).collect();
        let (r0, r1) = (sys.residual(&z.z).unwrap(), sys.residual(&za).unwrap());
        prop_assert!((r1 - r0).abs() <= 1e-9 * r0.max(1.0));
    }

    #[test]
    fn wls_matches_normal_equations(s in any::<u64>(), n in 3usize..8, extra in 0usize..6) {
        let mut rng = seed::rng(s);
        let t = common::random_grid(&mut rng, n, extra);
        let jac = t.jacobian(&t.reactances()).unwrap();
        let m = jac.measurement_count();
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..5.0)).collect();
        let z: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h = jac.matrix();
        let wm = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
        let oracle = (h.transpose() * &wm * h).try_inverse().unwrap() * h.transpose() * &wm * DVector::from_vec(z.clone());
        let got = wls_estimate(&jac, &w, &z).unwrap();
        for (a, b) in got.iter().zip(oracle.iter()) {
            prop_assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
        }
    }
}

#[test]
fn estimator_is_linear_in_the_measurement() {
    let t = GridTopology::ieee14();
    let jac = t.jacobian(&t.reactances()).unwrap();
    let est = StateEstimator::new(jac, vec![1.0; 54]).unwrap();
    let mut rng = seed::rng(3);
    let z1: Vec<f64> = (0..54).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z2: Vec<f64> = (0..54).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sum: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| 2.0 * a - b).collect();
    let (e1, e2, es) = (est.estimate(&z1).unwrap(), est.estimate(&z2).unwrap(), est.estimate(&sum).unwrap());
    for i in 0..13 {
        assert_relative_eq!(es[i], 2.0 * e1[i] - e2[i], epsilon = 1e-10);
    }
}

#[test]
fn calibrated_threshold_holds_on_fresh_samples() {
    let sys = common::system14(11);
    let mut rng = seed::rng(12);
    let n = 4000;
    let alarms = (0..n).filter(|_| sys.bdd_alarm(&sys.sample_clean(&mut rng).unwrap().1.z).unwrap()).count();
    let fpr = alarms as f64 / n as f64;
    assert!((fpr - 0.05).abs() < 0.02, "fpr {fpr}");
}
