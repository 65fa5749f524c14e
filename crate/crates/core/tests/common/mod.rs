#![allow(dead_code)]

use mtdgrid::attack::{build_dataset, AttackConfig};
use mtdgrid::detector::{architecture_for, train, DetectorModel, TrainConfig};
use mtdgrid::estimation::{calibrate_threshold, LoadRange, MeasurementSystem, NoiseModel};
use mtdgrid::grid::GridTopology;
use mtdgrid::seed;

pub fn system14(seed: u64) -> MeasurementSystem {
    let t = GridTopology::ieee14();
    let mut sys = MeasurementSystem::new(&t, &t.reactances(), NoiseModel::default(), LoadRange::default()).unwrap();
    calibrate_threshold(&mut sys, 0.05, 2000, &mut seed::rng(seed)).unwrap();
    sys
}

/// A quickly trained 14-bus detector, good enough to be attacked.
pub fn small_model(sys: &MeasurementSystem, seed: u64) -> DetectorModel {
    let attack = AttackConfig::new(0.05, 14).unwrap();
    let data = build_dataset(sys, &attack, 600, 600, seed::derive(seed, "data", 0)).unwrap();
    let mut m = DetectorModel::init(&architecture_for(data.dim()), seed::derive(seed, "init", 0)).unwrap();
    m.fit_standardizer(&data);
    train(&mut m, &data, &TrainConfig { epochs: 15, seed: seed::derive(seed, "train", 0), ..Default::default() }).unwrap();
    m
}

/// Random connected grid: a random spanning tree plus `extra` chords.
pub fn random_grid(rng: &mut seed::Rng, n: usize, extra: usize) -> GridTopology {
    use mtdgrid::grid::{Branch, Generator};
    use rand::Rng;
    let mut branches = Vec::new();
    let br = |from, to, rng: &mut seed::Rng| Branch { from, to, reactance: rng.random_range(0.05..0.5), flow_limit_mw: 1e4 };
    for b in 1..n {
        let to = rng.random_range(0..b);
        branches.push(br(b, to, rng));
    }
    while branches.len() < n - 1 + extra {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            branches.push(br(a, b, rng));
        }
    }
    let loads = (0..n).map(|i| if i == 0 { 0.0 } else { rng.random_range(10.0..60.0) }).collect();
    let gens = vec![Generator { bus: 0, cost_c2: 0.01, cost_c1: 10.0, pmin_mw: 0.0, pmax_mw: 1e4 }];
    GridTopology::new(n, 0, loads, branches, gens, Vec::new()).unwrap()
}
