//! BDD-bypassing false data injection (`a = Hc`) and labeled datasets.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::estimation::{EstimationError, MeasurementSystem, Provenance};
use crate::grid::JacobianMatrix;
use crate::seed;
use crate::textio::fmt_f64;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("cannot re-dispatch the operating point: {0}")]
    Replay(String),
    #[error("dataset file {path}: {msg}")]
    Io { path: String, msg: String },
}

/// Rows whose clean noise alone trips the detector are redrawn this many
/// times before giving up.
const MAX_BDD_REDRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Standard deviation of the per-state attack (radians).
    pub nu: f64,
    pub max_compromised: usize,
    /// State indices that may never be attacked.
    pub protected: Vec<usize>,
}

impl AttackConfig {
    /// Up to half the buses, nothing protected beyond the slack (which has no
    /// state).
    pub fn new(nu: f64, bus_count: usize) -> Result<Self, AttackError> {
        let cfg = Self { nu, max_compromised: bus_count / 2, protected: Vec::new() };
        cfg.validate(bus_count - 1)?;
        Ok(cfg)
    }

    pub fn validate(&self, state_count: usize) -> Result<(), AttackError> {
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(AttackError::Config(format!("nu must be positive, got {}", self.nu)));
        }
        if self.max_compromised == 0 {
            return Err(AttackError::Config("max_compromised must be at least 1".into()));
        }
        if self.protected.iter().any(|&p| p >= state_count) {
            return Err(AttackError::Config("protected index out of range".into()));
        }
        if self.protected.len() >= state_count {
            return Err(AttackError::Config("every state is protected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackRecord {
    pub c: Vec<f64>,
    /// Sorted state indices with `c_i ≠ 0`.
    pub support: Vec<usize>,
    pub a: Vec<f64>,
    pub nu: f64,
}

/// Support uniform over eligible states, size uniform in `[1, max]`,
/// `c_i ~ N(0, ν²)` on the support.
pub fn sample_attack<R: Rng + ?Sized>(config: &AttackConfig, jac: &JacobianMatrix, rng: &mut R) -> Result<AttackRecord, AttackError> {
    let n = jac.state_count();
    config.validate(n)?;
    let eligible: Vec<usize> = (0..n).filter(|i| !config.protected.contains(i)).collect();
    let kmax = config.max_compromised.min(eligible.len());
    let normal = Normal::new(0.0, config.nu).map_err(|e| AttackError::Config(e.to_string()))?;
    loop {
        let k = rng.random_range(1..=kmax);
        let mut support: Vec<usize> = eligible.choose_multiple(rng, k).copied().collect();
        support.sort_unstable();
        let mut c = vec![0.0; n];
        for &i in &support {
            c[i] = normal.sample(rng);
        }
        if support.iter().all(|&i| c[i].abs() < 1e-12) {
            continue;
        }
        let a = jac.apply(&c);
        return Ok(AttackRecord { c, support, a, nu: config.nu });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub z: Vec<f64>,
    pub label: u8,
    pub provenance: Provenance,
    pub seed: u64,
}

/// Labeled measurements. CSV columns: `z0..z{M-1},label,provenance,seed`,
/// optionally followed by extra named columns which are ignored on read.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: Vec<DatasetRow>,
}

impl Dataset {
    pub fn new(rows: Vec<DatasetRow>) -> Self {
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.z.len())
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.rows.iter().map(|r| r.z.as_slice()).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.rows.iter().filter(|r| r.label == label).count()
    }

    pub fn extend(&mut self, other: Dataset) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let m = self.dim();
        let mut out = String::new();
        for i in 0..m {
            let _ = write!(out, "z{i},");
        }
        out.push_str("label,provenance,seed\n");
        for r in &self.rows {
            for v in &r.z {
                out.push_str(&fmt_f64(*v));
                out.push(',');
            }
            let _ = writeln!(out, "{},{},{}", r.label, r.provenance.as_str(), r.seed);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, AttackError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| AttackError::Dataset("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let m = cols.iter().take_while(|c| c.starts_with('z')).count();
        for (i, c) in cols[..m].iter().enumerate() {
            if *c != format!("z{i}") {
                return Err(AttackError::Dataset(format!("unexpected header column `{c}`")));
            }
        }
        let find = |name: &str| {
            cols.iter()
                .position(|c| *c == name)
                .ok_or_else(|| AttackError::Dataset(format!("missing `{name}` column")))
        };
        let (il, ip, is) = (find("label")?, find("provenance")?, find("seed")?);
        let mut rows = Vec::new();
        for (ln, line) in lines {
            let err = |msg: String| AttackError::Dataset(format!("line {}: {msg}", ln + 1));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != cols.len() {
                return Err(err(format!("expected {} fields, got {}", cols.len(), f.len())));
            }
            let z = f[..m]
                .iter()
                .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number `{t}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            let label = match f[il] {
                "0" => 0,
                "1" => 1,
                other => return Err(err(format!("label must be 0 or 1, got `{other}`"))),
            };
            let provenance = f[ip].parse().map_err(err)?;
            let seed = f[is].parse().map_err(|_| err(format!("bad seed `{}`", f[is])))?;
            rows.push(DatasetRow { z, label, provenance, seed });
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<(), AttackError> {
        std::fs::write(path, self.to_csv()).map_err(|e| AttackError::Io { path: path.display().to_string(), msg: e.to_string() })
    }

    pub fn read(path: &Path) -> Result<Self, AttackError> {
        let text = std::fs::read_to_string(path).map_err(|e| AttackError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        Self::from_csv(&text)
    }

    /// Deterministic shuffle followed by a split into `(first, rest)` with
    /// `round(frac·n)` rows in `first`.
    pub fn split(&self, frac: f64, seed: u64) -> (Dataset, Dataset) {
        let mut rows = self.rows.clone();
        rows.shuffle(&mut seed::rng(seed));
        let k = ((frac * rows.len() as f64).round() as usize).min(rows.len());
        let rest = rows.split_off(k);
        (Dataset::new(rows), Dataset::new(rest))
    }
}

/// A clean measurement together with the operating point behind it, so the
/// same sample can be replayed under different reactances.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanSample {
    pub loads_mw: Vec<f64>,
    pub state: Vec<f64>,
    pub noise: Vec<f64>,
    pub z: Vec<f64>,
    pub seed: u64,
}

impl CleanSample {
    /// The same loads dispatched by `system`'s OPF, measured through its
    /// Jacobian with the same noise.
    pub fn remeasure(&self, system: &MeasurementSystem) -> Result<Vec<f64>, AttackError> {
        let sol = system.opf().solve(&self.loads_mw).map_err(|e| AttackError::Replay(e.to_string()))?;
        let slack = system.topology().slack();
        let state: Vec<f64> = sol.bus_angles.iter().enumerate().filter(|(b, _)| *b != slack).map(|(_, a)| *a).collect();
        let clean = system.jacobian().apply(&state);
        Ok(clean.iter().zip(&self.noise).map(|(c, e)| c + e).collect())
    }
}

/// Draws a clean measurement that passes the BDD. The row's stream is
/// `child(seed, tag, index)`; redraws continue on the same stream.
pub fn sample_passing_clean(system: &MeasurementSystem, seed: u64, tag: &str, index: u64) -> Result<CleanSample, AttackError> {
    let row_seed = seed::derive(seed, tag, index);
    let mut rng = seed::rng(row_seed);
    for _ in 0..MAX_BDD_REDRAWS {
        let (op, zv) = system.sample_clean(&mut rng)?;
        if !system.bdd_alarm(&zv.z)? {
            let clean = system.jacobian().apply(&op.state);
            let noise = zv.z.iter().zip(&clean).map(|(a, b)| a - b).collect();
            return Ok(CleanSample { loads_mw: op.loads_mw, state: op.state, noise, z: zv.z, seed: row_seed });
        }
    }
    Err(AttackError::Dataset("BDD rejects every clean draw; threshold too low".into()))
}

/// A clean sample with an FDIA on top, plus everything needed to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackedSample {
    pub clean: CleanSample,
    pub attack: AttackRecord,
    /// `z + a`.
    pub z_a: Vec<f64>,
}

impl AttackedSample {
    /// The clean part re-measured on `system` plus the same `a`.
    pub fn replay(&self, system: &MeasurementSystem) -> Result<Vec<f64>, AttackError> {
        Ok(self.clean.remeasure(system)?.iter().zip(&self.attack.a).map(|(c, a)| c + a).collect())
    }
}

pub fn sample_attacked(system: &MeasurementSystem, config: &AttackConfig, seed: u64, tag: &str, index: u64) -> Result<AttackedSample, AttackError> {
    let clean = sample_passing_clean(system, seed, tag, index)?;
    let mut rng = seed::child_rng(clean.seed, "attack", 0);
    let attack = sample_attack(config, system.jacobian(), &mut rng)?;
    let z_a: Vec<f64> = clean.z.iter().zip(&attack.a).map(|(z, a)| z + a).collect();
    Ok(AttackedSample { clean, attack, z_a })
}

/// `n_clean` label-0 and `n_attacked` label-1 rows, all passing the BDD
/// (`a = Hc` leaves the residual unchanged, so an attacked row passes iff its
/// clean part does), shuffled. Each row owns a derived seed.
pub fn build_dataset(
    system: &MeasurementSystem,
    config: &AttackConfig,
    n_clean: usize,
    n_attacked: usize,
    seed: u64,
) -> Result<Dataset, AttackError> {
    if n_clean == 0 || n_attacked == 0 {
        return Err(AttackError::Config("dataset counts must be at least 1".into()));
    }
    config.validate(system.jacobian().state_count())?;
    let clean: Vec<DatasetRow> = (0..n_clean as u64)
        .into_par_iter()
        .map(|i| {
            let s = sample_passing_clean(system, seed, "clean", i)?;
            Ok(DatasetRow { z: s.z, label: 0, provenance: Provenance::Clean, seed: s.seed })
        })
        .collect::<Result<_, AttackError>>()?;
    let attacked: Vec<DatasetRow> = (0..n_attacked as u64)
        .into_par_iter()
        .map(|i| {
            let s = sample_attacked(system, config, seed, "fdia", i)?;
            Ok(DatasetRow { z: s.z_a, label: 1, provenance: Provenance::Fdia, seed: s.clean.seed })
        })
        .collect::<Result<_, AttackError>>()?;
    let mut rows = clean;
    rows.extend(attacked);
    rows.shuffle(&mut seed::child_rng(seed, "shuffle", 0));
    Ok(Dataset::new(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{calibrate_threshold, LoadRange, NoiseModel};
    use crate::grid::GridTopology;
    use approx::assert_relative_eq;

    pub(crate) fn system14() -> MeasurementSystem {
        let t = GridTopology::ieee14();
        let mut s = MeasurementSystem::new(&t, &t.reactances(), NoiseModel::default(), LoadRange::default()).unwrap();
        calibrate_threshold(&mut s, 0.05, 2000, &mut seed::rng(99)).unwrap();
        s
    }

    #[test]
    fn attacks_respect_sparsity_and_bypass_bdd() {
        let sys = system14();
        let cfg = AttackConfig::new(0.05, 14).unwrap();
        assert_eq!(cfg.max_compromised, 7);
        let mut rng = seed::rng(4);
        let mut sizes = [0usize; 8];
        for _ in 0..2000 {
            let rec = sample_attack(&cfg, sys.jacobian(), &mut rng).unwrap();
            assert!((1..=7).contains(&rec.support.len()));
            sizes[rec.support.len()] += 1;
            for (i, c) in rec.c.iter().enumerate() {
                assert_eq!(*c != 0.0, rec.support.contains(&i));
            }
            let (_, z) = sys.sample_clean(&mut rng).unwrap();
            let za: Vec<f64> = z.z.iter().zip(&rec.a).map(|(a, b)| a + b).collect();
            let (r0, r1) = (sys.residual(&z.z).unwrap(), sys.residual(&za).unwrap());
            assert!((r1 - r0).abs() <= 1e-9 * r0.max(1.0));
            let th = sys.estimator().estimate(&z.z).unwrap();
            let tha = sys.estimator().estimate(&za).unwrap();
            for i in 0..13 {
                assert_relative_eq!(tha[i], th[i] + rec.c[i], epsilon = 1e-9);
            }
        }
        // Every support size occurs.
        assert!(sizes[1..].iter().all(|&n| n > 150), "{sizes:?}");
    }

    #[test]
    fn protected_states_are_never_attacked() {
        let sys = system14();
        let mut cfg = AttackConfig::new(0.1, 14).unwrap();
        cfg.protected = vec![0, 3, 4];
        let mut rng = seed::rng(8);
        for _ in 0..500 {
            let rec = sample_attack(&cfg, sys.jacobian(), &mut rng).unwrap();
            assert!(rec.support.iter().all(|i| !cfg.protected.contains(i)));
        }
        assert!(AttackConfig::new(0.0, 14).is_err());
    }

    #[test]
    fn dataset_balance_bdd_and_determinism() {
        let sys = system14();
        let cfg = AttackConfig::new(0.05, 14).unwrap();
        let d = build_dataset(&sys, &cfg, 150, 120, 5).unwrap();
        assert_eq!(d.len(), 270);
        assert_eq!(d.count_label(0), 150);
        assert_eq!(d.count_label(1), 120);
        for r in &d.rows {
            assert!(!sys.bdd_alarm(&r.z).unwrap());
            assert_eq!(r.label == 1, r.provenance == Provenance::Fdia);
        }
        let again = build_dataset(&sys, &cfg, 150, 120, 5).unwrap();
        assert_eq!(d.to_csv(), again.to_csv());
        assert_ne!(d.to_csv(), build_dataset(&sys, &cfg, 150, 120, 6).unwrap().to_csv());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let sys = system14();
        let d = build_dataset(&sys, &AttackConfig::new(0.2, 14).unwrap(), 10, 10, 1).unwrap();
        let back = Dataset::from_csv(&d.to_csv()).unwrap();
        assert_eq!(back, d);
        assert!(Dataset::from_csv("").is_err());
        assert!(Dataset::from_csv("z0,label,provenance,seed\n1.0,2,clean,0\n").is_err());
        assert!(Dataset::from_csv("z0,label,provenance,seed\n1.0,1,clean\n").is_err());
        let extra = Dataset::from_csv("z0,z1,label,provenance,seed,cai\n1,2,1,adversarial,9,0.5\n").unwrap();
        assert_eq!(extra.rows[0].z, vec![1.0, 2.0]);
        assert_eq!(extra.rows[0].provenance, Provenance::Adversarial);
        let (a, b) = d.split(0.25, 3);
        assert_eq!((a.len(), b.len()), (5, 15));
    }
}
