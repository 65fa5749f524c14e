//! Model pool: perturbed and diversified copies of a base detector that vote
//! on every measurement, with optional adversarial hardening and periodic
//! renewal.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::adversarial::{collect_successful, AdvConfig, AdvError};
use crate::attack::{build_dataset, AttackConfig, AttackError, Dataset, DatasetRow};
use crate::detector::{train, DetectorError, DetectorModel, TrainConfig};
use crate::estimation::{MeasurementSystem, Provenance};
use crate::seed;
use crate::textio::fmt_f64;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("invalid pool configuration: {0}")]
    Config(String),
    #[error("empty pool")]
    Empty,
    #[error("no student was evaded by any adversarial sample; transferability undefined")]
    NoEvasions,
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Adversarial(#[from] AdvError),
    #[error("pool manifest: {0}")]
    Manifest(String),
    #[error("pool file {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightNoise {
    /// `ε ~ U(−f·|ω|, f·|ω|)` elementwise.
    #[default]
    Uniform,
    /// `ε ~ Laplace(0, f·|ω|)` elementwise.
    Laplace,
}

impl std::str::FromStr for WeightNoise {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "laplace" => Ok(Self::Laplace),
            _ => Err(format!("unknown weight noise `{s}` (uniform|laplace)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvTrainBudget {
    pub rounds: usize,
    pub samples_per_round: usize,
    /// Epochs of each retraining pass after adding adversarial rows.
    pub epochs: usize,
}

impl Default for AdvTrainBudget {
    fn default() -> Self {
        Self { rounds: 2, samples_per_round: 1000, epochs: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolConfig {
    pub k: usize,
    pub p: usize,
    pub perturbation: f64,
    pub noise: WeightNoise,
    pub nu_range: (f64, f64),
    /// Clean and attacked rows per student dataset.
    pub samples_per_class: usize,
    pub retrain: TrainConfig,
    pub adv_budget: AdvTrainBudget,
    pub adv: AdvConfig,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            k: 10,
            p: 6,
            perturbation: 0.1,
            noise: WeightNoise::Uniform,
            nu_range: (0.05, 0.3),
            samples_per_class: 5000,
            retrain: TrainConfig::default(),
            adv_budget: AdvTrainBudget::default(),
            adv: AdvConfig::default(),
            seed: 0,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), PoolError> {
        let bad = |m: &str| Err(PoolError::Config(m.into()));
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if self.p > self.k {
            return bad("p must not exceed K");
        }
        if !(self.perturbation >= 0.0) {
            return bad("perturbation fraction must be nonnegative");
        }
        let (lo, hi) = self.nu_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad("nu range must satisfy 0 < low <= high");
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentProvenance {
    pub nu: f64,
    pub hardened: bool,
    pub seed: u64,
    /// Validation accuracy after diversification.
    pub accuracy: f64,
    /// Adversarial rows added during hardening.
    pub adversarial_rows: usize,
    /// Attack attempts skipped because the student already missed the FDIA.
    pub skipped: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    pub model: DetectorModel,
    pub provenance: StudentProvenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelPool {
    pub students: Vec<Student>,
    pub generation: u64,
    pub config: PoolConfig,
}

/// Inverse-CDF draw from `Laplace(0, b)`.
fn laplace<R: Rng + ?Sized>(rng: &mut R, b: f64) -> f64 {
    let u: f64 = rng.random_range(-0.5..0.5);
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Copy of `base` with multiplicative weight noise, drawn from the stream of
/// student `index`. Students keep the base input standardization.
pub fn spawn_student(base: &DetectorModel, index: usize, fraction: f64, noise: WeightNoise, seed: u64) -> DetectorModel {
    let mut rng = seed::child_rng(seed, "spawn", index as u64);
    let mut m = base.clone();
    if fraction > 0.0 {
        m.params.for_each_mut(|w| {
            let scale = fraction * w.abs();
            if scale > 0.0 {
                *w += match noise {
                    WeightNoise::Uniform => rng.random_range(-scale..=scale),
                    WeightNoise::Laplace => laplace(&mut rng, scale),
                };
            }
        });
    }
    m
}

pub fn spawn_students(base: &DetectorModel, k: usize, fraction: f64, noise: WeightNoise, seed: u64) -> Vec<DetectorModel> {
    (0..k).map(|i| spawn_student(base, i, fraction, noise, seed)).collect()
}

/// Retrains a spawned student on a fresh dataset built with attack size `nu`.
/// Returns the dataset (needed for hardening) and the validation accuracy.
pub fn diversify_retrain(
    student: &mut DetectorModel,
    system: &MeasurementSystem,
    nu: f64,
    samples_per_class: usize,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(Dataset, f64), PoolError> {
    let attack = AttackConfig::new(nu, system.topology().bus_count())?;
    let data = build_dataset(system, &attack, samples_per_class, samples_per_class, seed::derive(seed, "data", 0))?;
    let cfg = TrainConfig { seed: seed::derive(seed, "train", 0), ..train_cfg.clone() };
    let report = train(student, &data, &cfg)?;
    Ok((data, report.validation_accuracy))
}

/// Iterative hardening: craft CW attacks against the current student, add
/// them with label 1 and retrain on the accumulated set. Attempts where the
/// student already misses the plain FDIA are skipped and counted.
pub fn adversarial_train(
    student: &mut DetectorModel,
    system: &MeasurementSystem,
    data: &Dataset,
    nu: f64,
    budget: &AdvTrainBudget,
    adv: &AdvConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(usize, u64), PoolError> {
    let attack = AttackConfig::new(nu, system.topology().bus_count())?;
    let mut set = data.clone();
    let mut added = 0;
    let mut skipped = 0;
    for round in 0..budget.rounds {
        let tag = format!("harden-{round}");
        let n = budget.samples_per_round;
        let (samples, used) = collect_successful(system, student, &attack, adv, seed, &tag, n, 4 * n as u64 + 16)?;
        skipped += used - samples.len() as u64;
        added += samples.len();
        set.rows.extend(samples.into_iter().map(|s| DatasetRow {
            seed: s.attacked.clean.seed,
            z: s.result.z_adv,
            label: 1,
            provenance: Provenance::Adversarial,
        }));
        let cfg = TrainConfig { epochs: budget.epochs, seed: seed::derive(seed, "harden-train", round as u64), ..train_cfg.clone() };
        train(student, &set, &cfg)?;
    }
    Ok((added, skipped))
}

/// Label 1 iff at least `⌈K/2⌉` students vote 1, so ties raise the alarm.
pub fn vote_threshold(k: usize) -> usize {
    k.div_ceil(2)
}

pub fn vote_labels(labels: &[u8]) -> u8 {
    let ones = labels.iter().filter(|l| **l == 1).count();
    u8::from(ones >= vote_threshold(labels.len()))
}

impl ModelPool {
    pub fn k(&self) -> usize {
        self.students.len()
    }

    pub fn models(&self) -> Vec<&DetectorModel> {
        self.students.iter().map(|s| &s.model).collect()
    }

    pub fn vote(&self, z: &[f64]) -> Result<u8, PoolError> {
        if self.students.is_empty() {
            return Err(PoolError::Empty);
        }
        let labels = self.students.iter().map(|s| s.model.predict(z)).collect::<Result<Vec<_>, _>>()?;
        Ok(vote_labels(&labels))
    }

    /// Majority labels for many rows; also returns the per-student labels
    /// (`[student][row]`).
    pub fn vote_batch(&self, rows: &[&[f64]]) -> Result<(Vec<u8>, Vec<Vec<u8>>), PoolError> {
        if self.students.is_empty() {
            return Err(PoolError::Empty);
        }
        let per: Vec<Vec<u8>> = self.students.iter().map(|s| s.model.predict_batch(rows)).collect::<Result<_, _>>()?;
        let votes = (0..rows.len()).map(|r| vote_labels(&per.iter().map(|p| p[r]).collect::<Vec<_>>())).collect();
        Ok((votes, per))
    }
}

/// Steps 1-2 for student `index` of a generation: spawn and diversify.
/// Returns the student with the dataset it was retrained on. Seeds depend only
/// on the generation and index, so a pool of `k` students is a prefix of any
/// larger pool with the same configuration.
pub fn diversified_student(
    base: &DetectorModel,
    system: &MeasurementSystem,
    config: &PoolConfig,
    generation: u64,
    index: usize,
) -> Result<(Student, Dataset), PoolError> {
    let gen_seed = seed::derive(config.seed, "generation", generation);
    let mut model = spawn_student(base, index, config.perturbation, config.noise, gen_seed);
    let s = seed::derive(gen_seed, "student", index as u64);
    let nu = seed::child_rng(s, "nu", 0).random_range(config.nu_range.0..=config.nu_range.1);
    let (data, accuracy) = diversify_retrain(&mut model, system, nu, config.samples_per_class, &config.retrain, s)?;
    let provenance = StudentProvenance { nu, hardened: false, seed: s, accuracy, adversarial_rows: 0, skipped: 0 };
    Ok((Student { model, provenance }, data))
}

/// Step 3 applied to a diversified student.
pub fn hardened_student(
    plain: &Student,
    data: &Dataset,
    system: &MeasurementSystem,
    config: &PoolConfig,
) -> Result<Student, PoolError> {
    let mut model = plain.model.clone();
    let p = &plain.provenance;
    let (adversarial_rows, skipped) = adversarial_train(
        &mut model,
        system,
        data,
        p.nu,
        &config.adv_budget,
        &config.adv,
        &config.retrain,
        seed::derive(p.seed, "harden", 0),
    )?;
    Ok(Student { model, provenance: StudentProvenance { hardened: true, adversarial_rows, skipped, ..p.clone() } })
}

/// Steps 1-3 for one generation: spawn, diversify every student, harden the
/// first `p`.
pub fn build_pool(base: &DetectorModel, system: &MeasurementSystem, config: &PoolConfig, generation: u64) -> Result<ModelPool, PoolError> {
    config.validate()?;
    let students = (0..config.k)
        .into_par_iter()
        .map(|i| {
            let (plain, data) = diversified_student(base, system, config, generation, i)?;
            if i < config.p {
                hardened_student(&plain, &data, system, config)
            } else {
                Ok(plain)
            }
        })
        .collect::<Result<Vec<_>, PoolError>>()?;
    Ok(ModelPool { students, generation, config: config.clone() })
}

/// Step 4: a full rebuild under the next generation's seed.
pub fn refresh_pool(base: &DetectorModel, system: &MeasurementSystem, old: &ModelPool) -> Result<ModelPool, PoolError> {
    build_pool(base, system, &old.config, old.generation + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transferability {
    /// `η[i][j]`; `None` where student `i` was never evaded.
    pub eta: Vec<Vec<Option<f64>>>,
    pub eta_av: f64,
    /// Students with `N_adv(f_i) = 0`, excluded from the average.
    pub excluded: Vec<usize>,
}

/// `η_ij = N(i→j)/N(i)` over a common adversarial set, where `N(i)` counts
/// samples evading student `i` and `N(i→j)` those evading both. `η_av` is the
/// mean over ordered pairs `i ≠ j` with `N(i) > 0`.
pub fn transferability(pool: &ModelPool, adv_set: &[&[f64]]) -> Result<Transferability, PoolError> {
    let (_, per) = pool.vote_batch(adv_set)?;
    transferability_from_labels(&per)
}

pub fn transferability_from_labels(per: &[Vec<u8>]) -> Result<Transferability, PoolError> {
    let k = per.len();
    if k == 0 {
        return Err(PoolError::Empty);
    }
    let evade: Vec<Vec<bool>> = per.iter().map(|p| p.iter().map(|l| *l == 0).collect()).collect();
    let mut eta = vec![vec![None; k]; k];
    let mut excluded = Vec::new();
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..k {
        let ni = evade[i].iter().filter(|e| **e).count();
        if ni == 0 {
            excluded.push(i);
            continue;
        }
        for j in 0..k {
            let nij = evade[i].iter().zip(&evade[j]).filter(|(a, b)| **a && **b).count();
            let v = nij as f64 / ni as f64;
            eta[i][j] = Some(v);
            if i != j {
                sum += v;
                count += 1;
            }
        }
    }
    if excluded.len() == k {
        return Err(PoolError::NoEvasions);
    }
    let eta_av = if count == 0 { 0.0 } else { sum / count as f64 };
    Ok(Transferability { eta, eta_av, excluded })
}

const MANIFEST_HEADER: &str = "mtdgrid-pool 1";

/// Writes `pool.manifest` plus one model file per student into `dir`.
pub fn save_pool(pool: &ModelPool, dir: &Path) -> Result<(), PoolError> {
    let io = |e: std::io::Error| PoolError::Io { path: dir.display().to_string(), msg: e.to_string() };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut out = String::new();
    let _ = writeln!(out, "{MANIFEST_HEADER}");
    let _ = writeln!(out, "generation {}", pool.generation);
    let _ = writeln!(out, "k {}", pool.k());
    let _ = writeln!(out, "p {}", pool.students.iter().filter(|s| s.provenance.hardened).count());
    let _ = writeln!(out, "seed {}", pool.config.seed);
    for (i, s) in pool.students.iter().enumerate() {
        let file = format!("student_{i}.model");
        s.model.save(&dir.join(&file))?;
        let p = &s.provenance;
        let _ = writeln!(
            out,
            "student {i} model={file} nu={} hardened={} seed={} accuracy={} adversarial_rows={} skipped={}",
            fmt_f64(p.nu),
            u8::from(p.hardened),
            p.seed,
            fmt_f64(p.accuracy),
            p.adversarial_rows,
            p.skipped
        );
    }
    std::fs::write(dir.join("pool.manifest"), out).map_err(io)
}

/// Reads a pool written by [`save_pool`]. Settings not stored in the
/// manifest take their defaults.
pub fn load_pool(dir: &Path) -> Result<ModelPool, PoolError> {
    let path = dir.join("pool.manifest");
    let text = std::fs::read_to_string(&path).map_err(|e| PoolError::Io { path: path.display().to_string(), msg: e.to_string() })?;
    let bad = |m: String| PoolError::Manifest(m);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(bad("missing or unsupported header".into()));
    }
    let mut config = PoolConfig::default();
    let mut generation = 0;
    let mut students = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default();
        let num = |v: Option<&str>| -> Result<u64, PoolError> {
            v.and_then(|v| v.parse().ok()).ok_or_else(|| bad(format!("bad line `{line}`")))
        };
        match key {
            "generation" => generation = num(parts.next())?,
            "k" => config.k = num(parts.next())? as usize,
            "p" => config.p = num(parts.next())? as usize,
            "seed" => config.seed = num(parts.next())?,
            "student" => {
                parts.next();
                let mut kv = std::collections::HashMap::new();
                for p in parts {
                    let (k, v) = p.split_once('=').ok_or_else(|| bad(format!("bad field `{p}`")))?;
                    kv.insert(k, v);
                }
                let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("student line lacks `{k}`")));
                let model = DetectorModel::load(&dir.join(get("model")?))?;
                let f = |k: &str| -> Result<f64, PoolError> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
                let u = |k: &str| -> Result<u64, PoolError> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
                students.push(Student {
                    model,
                    provenance: StudentProvenance {
                        nu: f("nu")?,
                        hardened: get("hardened")? == "1",
                        seed: u("seed")?,
                        accuracy: f("accuracy")?,
                        adversarial_rows: u("adversarial_rows")? as usize,
                        skipped: u("skipped")?,
                    },
                });
            }
            _ => return Err(bad(format!("unknown key `{key}`"))),
        }
    }
    if students.len() != config.k {
        return Err(bad(format!("k = {} but {} students listed", config.k, students.len())));
    }
    Ok(ModelPool { students, generation, config })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorModel;

    fn base() -> DetectorModel {
        DetectorModel::init(&[6, 8, 4, 2], 3).unwrap()
    }

    fn pool_of(models: Vec<DetectorModel>) -> ModelPool {
        ModelPool {
            students: models
                .into_iter()
                .map(|model| Student {
                    model,
                    provenance: StudentProvenance { nu: 0.1, hardened: false, seed: 0, accuracy: 1.0, adversarial_rows: 0, skipped: 0 },
                })
                .collect(),
            generation: 0,
            config: PoolConfig::default(),
        }
    }

    #[test]
    fn spawn_bounds_and_identity() {
        let b = base();
        let same = spawn_students(&b, 3, 0.0, WeightNoise::Uniform, 1);
        assert!(same.iter().all(|m| *m == b));
        let s = spawn_students(&b, 4, 0.1, WeightNoise::Uniform, 1);
        let wb = b.params.flat();
        for m in &s {
            for (w, w0) in m.params.flat().iter().zip(&wb) {
                assert!((w - w0).abs() <= 0.1 * w0.abs() + 1e-15);
            }
            assert_eq!(m.standardizer, b.standardizer);
        }
        assert_ne!(s[0], s[1]);
        assert_ne!(s[0], spawn_students(&b, 1, 0.1, WeightNoise::Uniform, 2)[0]);
        assert_eq!(s, spawn_students(&b, 4, 0.1, WeightNoise::Uniform, 1));
        let l = spawn_students(&b, 1, 0.1, WeightNoise::Laplace, 1);
        assert_ne!(l[0], b);
    }

    #[test]
    fn vote_rules() {
        assert_eq!(vote_labels(&[1, 1, 0]), 1);
        assert_eq!(vote_labels(&[0; 7]), 0);
        assert_eq!(vote_labels(&[1, 0, 1, 0, 1, 0, 1, 0, 1, 0]), 1);
        assert_eq!(vote_labels(&[1, 0, 0, 0, 1, 0, 1, 0, 1, 0]), 0);
        assert_eq!(vote_labels(&[1]), 1);
        assert_eq!(vote_threshold(10), 5);
        assert_eq!(vote_threshold(9), 5);
        let empty = pool_of(vec![]);
        assert!(matches!(empty.vote(&[0.0; 6]), Err(PoolError::Empty)));
    }

    #[test]
    fn transferability_definitions() {
        // Identical models: every evasion transfers.
        let t = transferability_from_labels(&[vec![0, 1, 0], vec![0, 1, 0], vec![0, 1, 0]]).unwrap();
        assert_eq!(t.eta_av, 1.0);
        assert!(t.excluded.is_empty());
        // Student 2 never evaded: excluded; diagonal not averaged.
        let t = transferability_from_labels(&[vec![0, 0, 1, 1], vec![0, 1, 1, 0], vec![1, 1, 1, 1]]).unwrap();
        assert_eq!(t.excluded, vec![2]);
        assert_eq!(t.eta[0][1], Some(0.5));
        assert_eq!(t.eta[0][2], Some(0.0));
        assert_eq!(t.eta[1][0], Some(0.5));
        assert_eq!(t.eta[0][0], Some(1.0));
        assert!((t.eta_av - (0.5 + 0.0 + 0.5 + 0.0) / 4.0).abs() < 1e-15);
        assert!(matches!(transferability_from_labels(&[vec![1, 1], vec![1, 1]]), Err(PoolError::NoEvasions)));
    }

    #[test]
    fn manifest_round_trip() {
        let b = base();
        let pool = pool_of(spawn_students(&b, 3, 0.1, WeightNoise::Uniform, 9));
        let dir = tempfile::tempdir().unwrap();
        save_pool(&pool, dir.path()).unwrap();
        let back = load_pool(dir.path()).unwrap();
        assert_eq!(back.students, pool.students);
        assert_eq!(back.generation, 0);
        assert!(PoolConfig { p: 4, k: 3, ..Default::default() }.validate().is_err());
    }
}
