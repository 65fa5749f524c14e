//! Building blocks shared by the experiments: one replicate's grid, BDD and
//! base detector; adversarial test sets; student banks; physics-MTD stages;
//! and screening of measurements by BDD, detector or pool.

use rayon::prelude::*;
use thiserror::Error;

use super::config::{ConfigError, ExperimentConfig};
use super::metrics::MetricError;
use crate::adversarial::{collect_successful, AdvError, AdversarialSample};
use crate::attack::{build_dataset, sample_attacked, sample_passing_clean, AttackConfig, AttackError, AttackedSample, CleanSample, Dataset};
use crate::detector::{architecture_for, train, DetectorError, DetectorModel, TrainReport};
use crate::estimation::{calibrate_threshold, EstimationError, MeasurementSystem, SystemError};
use crate::grid::GridTopology;
use crate::physics::adapt::{adapt_base_model, perturbed_system, AdaptError, Adaptation};
use crate::physics::perturb::{cost_optimal_reactances, optimize_perturbation, MtdError, MtdPerturbation};
use crate::pool::{diversified_student, hardened_student, ModelPool, PoolConfig, PoolError, Student};
use crate::seed;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Adversarial(#[from] AdvError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Mtd(#[from] MtdError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{context}: {source}")]
    Context { context: String, source: Box<HarnessError> },
}

impl HarnessError {
    pub fn context(self, context: impl Into<String>) -> Self {
        Self::Context { context: context.into(), source: Box::new(self) }
    }
}

/// Seed of replicate `r` under a master seed.
pub fn replicate_seed(master: u64, r: usize) -> u64 {
    seed::derive(master, "replicate", r as u64)
}

/// Pre-perturbation reactances: the cost-optimal D-FACTS setting, or the
/// case values when the grid has no D-FACTS lines.
pub fn operating_reactances(cfg: &ExperimentConfig, topo: &GridTopology) -> Result<Vec<f64>, HarnessError> {
    if topo.dfacts().is_empty() {
        return Ok(topo.reactances());
    }
    Ok(cost_optimal_reactances(topo, topo.base_loads_mw(), &cfg.perturb_config(0))?)
}

/// A measurement system at `reactances` with a BDD threshold calibrated on
/// its own clean samples.
pub fn calibrated_system(cfg: &ExperimentConfig, topo: &GridTopology, reactances: &[f64], seed: u64) -> Result<MeasurementSystem, HarnessError> {
    let mut system = MeasurementSystem::new(topo, reactances, cfg.noise()?, cfg.load_range()?)?;
    let mut rng = seed::child_rng(seed, "calibrate", 0);
    calibrate_threshold(&mut system, cfg.estimator.fpr, cfg.estimator.calibration_samples, &mut rng)?;
    Ok(system)
}

/// Base dataset and a freshly trained base detector.
pub fn train_base(cfg: &ExperimentConfig, system: &MeasurementSystem, seed: u64) -> Result<(DetectorModel, TrainReport, Dataset), HarnessError> {
    let attack = AttackConfig::new(cfg.attack.train_nu, system.topology().bus_count())?;
    let n = cfg.attack.samples_per_class;
    let data = build_dataset(system, &attack, n, n, seed::derive(seed, "base-data", 0))?;
    let mut model = DetectorModel::init(&architecture_for(data.dim()), seed::derive(seed, "base-init", 0))?;
    model.fit_standardizer(&data);
    let report = train(&mut model, &data, &cfg.train_config(seed::derive(seed, "base-train", 0)))?;
    Ok((model, report, data))
}

/// One replicate: grid, calibrated BDD and trained base detector.
#[derive(Debug, Clone)]
pub struct Setup {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub topology: GridTopology,
    pub reactances: Vec<f64>,
    pub system: MeasurementSystem,
    pub base: DetectorModel,
    pub base_report: TrainReport,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self, HarnessError> {
        let topology = cfg.topology()?;
        let reactances = operating_reactances(cfg, &topology)?;
        let system = calibrated_system(cfg, &topology, &reactances, seed)?;
        let (base, base_report, _) = train_base(cfg, &system, seed)?;
        Ok(Self { seed, config: cfg.clone(), topology, reactances, system, base, base_report })
    }

    pub fn attack_config(&self, nu: f64) -> Result<AttackConfig, HarnessError> {
        Ok(AttackConfig::new(nu, self.topology.bus_count())?)
    }

    /// Up to `n` successful CW attacks of size `nu` against `model`, crafted
    /// on the pre-perturbation system. Returns the samples and the number of
    /// indices consumed.
    pub fn adversarial_set(&self, model: &DetectorModel, nu: f64, n: usize, tag: &str) -> Result<(Vec<AdversarialSample>, u64), HarnessError> {
        let attack = self.attack_config(nu)?;
        let max = (n * self.config.attack.attempt_factor) as u64;
        Ok(collect_successful(&self.system, model, &attack, &self.config.adv_config(), seed::derive(self.seed, "adversarial", 0), tag, n, max)?)
    }

    /// The standard test set: attacks of size `nu` against the base model.
    pub fn test_set(&self, nu: f64) -> Result<Vec<AdversarialSample>, HarnessError> {
        let tag = format!("test-{}", crate::textio::fmt_f64(nu));
        Ok(self.adversarial_set(&self.base, nu, self.config.attack.test_samples, &tag)?.0)
    }

    /// Clean and plain-FDIA samples for accuracy on legitimate traffic,
    /// replayable under other reactances.
    pub fn legitimate_set(&self, n_per_class: usize) -> Result<(Vec<CleanSample>, Vec<AttackedSample>), HarnessError> {
        let attack = self.attack_config(self.config.attack.train_nu)?;
        let s = seed::derive(self.seed, "legitimate", 0);
        let clean = (0..n_per_class as u64).into_par_iter().map(|i| sample_passing_clean(&self.system, s, "clean", i)).collect::<Result<Vec<_>, _>>()?;
        let fdia = (0..n_per_class as u64).into_par_iter().map(|i| sample_attacked(&self.system, &attack, s, "fdia", i)).collect::<Result<Vec<_>, _>>()?;
        Ok((clean, fdia))
    }

    pub fn pool_config(&self) -> PoolConfig {
        self.config.pool_config(seed::derive(self.seed, "pool", 0))
    }

    /// Physics MTD at `target` followed by adaptation of the base model.
    pub fn mtd_stage(&self, target: f64) -> Result<MtdStage, HarnessError> {
        let cfg = &self.config;
        let tag = crate::textio::fmt_f64(target);
        let perturbation = optimize_perturbation(
            &self.topology,
            &self.reactances,
            self.topology.base_loads_mw(),
            target,
            &cfg.perturb_config(seed::derive(self.seed, "mtd", 0)),
        )?;
        let system = perturbed_system(
            &self.system,
            &perturbation.reactances,
            cfg.estimator.fpr,
            cfg.estimator.calibration_samples,
            seed::derive(self.seed, &format!("mtd-system-{tag}"), 0),
        )?;
        let n = cfg.mtd.adapt_samples_per_class;
        let adapted = adapt_base_model(
            &self.base,
            &system,
            cfg.attack.train_nu,
            n,
            &cfg.train_config(0),
            seed::derive(self.seed, &format!("adapt-{tag}"), 0),
        )?;
        Ok(MtdStage { perturbation, system, adapted })
    }
}

/// A reactance perturbation, the system it produces and the adapted base
/// model.
#[derive(Debug, Clone)]
pub struct MtdStage {
    pub perturbation: MtdPerturbation,
    pub system: MeasurementSystem,
    pub adapted: Adaptation,
}

/// Diversified students `0..k` and hardened versions of the first `h`.
/// Any pool `(k' ≤ k, p ≤ h)` of the same configuration is assembled from it
/// without retraining.
#[derive(Debug, Clone)]
pub struct StudentBank {
    pub plain: Vec<Student>,
    pub hardened: Vec<Student>,
    pub config: PoolConfig,
    pub generation: u64,
}

impl StudentBank {
    pub fn build(base: &DetectorModel, system: &MeasurementSystem, config: &PoolConfig, generation: u64, k: usize, h: usize) -> Result<Self, HarnessError> {
        let h = h.min(k);
        let built: Vec<(Student, Option<Student>)> = (0..k)
            .into_par_iter()
            .map(|i| {
                let (plain, data) = diversified_student(base, system, config, generation, i)?;
                let hard = if i < h { Some(hardened_student(&plain, &data, system, config)?) } else { None };
                Ok((plain, hard))
            })
            .collect::<Result<_, PoolError>>()?;
        let (plain, hardened): (Vec<_>, Vec<_>) = built.into_iter().unzip();
        Ok(Self { plain, hardened: hardened.into_iter().flatten().collect(), config: config.clone(), generation })
    }

    pub fn pool(&self, k: usize, p: usize) -> Result<ModelPool, HarnessError> {
        if k == 0 || k > self.plain.len() || p > k || p > self.hardened.len() {
            return Err(PoolError::Config(format!("bank of {} (+{} hardened) cannot form K={k}, p={p}", self.plain.len(), self.hardened.len())).into());
        }
        let students = self.hardened[..p].iter().chain(&self.plain[p..k]).cloned().collect();
        Ok(ModelPool { students, generation: self.generation, config: PoolConfig { k, p, ..self.config.clone() } })
    }
}

/// Which learned detector screens the measurements.
#[derive(Debug, Clone, Copy)]
pub enum Detector<'a> {
    None,
    Model(&'a DetectorModel),
    Pool(&'a ModelPool),
}

/// A defense: an optional BDD alarm OR an optional learned detector.
#[derive(Debug, Clone, Copy)]
pub struct Screen<'a> {
    pub bdd: bool,
    pub detector: Detector<'a>,
}

impl Screen<'_> {
    /// Label 1 where any enabled component flags the row.
    pub fn flags(&self, system: &MeasurementSystem, rows: &[Vec<f64>]) -> Result<Vec<u8>, HarnessError> {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let mut out = match self.detector {
            Detector::None => vec![0u8; rows.len()],
            Detector::Model(m) => m.predict_batch(&refs)?,
            Detector::Pool(p) => p.vote_batch(&refs)?.0,
        };
        if self.bdd {
            for (o, r) in out.iter_mut().zip(rows) {
                if system.bdd_alarm(r)? {
                    *o = 1;
                }
            }
        }
        Ok(out)
    }
}

/// Adversarial rows as seen by `system`: the crafted vectors themselves when
/// `system` is `None`, otherwise replayed there.
pub fn adversarial_rows(samples: &[AdversarialSample], system: Option<&MeasurementSystem>) -> Result<Vec<Vec<f64>>, HarnessError> {
    match system {
        None => Ok(samples.iter().map(|s| s.result.z_adv.clone()).collect()),
        Some(sys) => Ok(samples.par_iter().map(|s| s.replay(sys)).collect::<Result<_, _>>()?),
    }
}

/// Legitimate rows (clean then FDIA) with labels, optionally replayed.
pub fn legitimate_rows(
    clean: &[CleanSample],
    fdia: &[AttackedSample],
    system: Option<&MeasurementSystem>,
) -> Result<(Vec<Vec<f64>>, Vec<u8>), HarnessError> {
    let mut rows: Vec<Vec<f64>> = match system {
        None => clean.iter().map(|c| c.z.clone()).collect(),
        Some(s) => clean.par_iter().map(|c| c.remeasure(s)).collect::<Result<_, _>>()?,
    };
    match system {
        None => rows.extend(fdia.iter().map(|f| f.z_a.clone())),
        Some(s) => rows.extend(fdia.par_iter().map(|f| f.replay(s)).collect::<Result<Vec<_>, _>>()?),
    }
    let labels = std::iter::repeat_n(0u8, clean.len()).chain(std::iter::repeat_n(1u8, fdia.len())).collect();
    Ok((rows, labels))
}

/// Share of label-1 verdicts.
pub fn detection_rate(flags: &[u8]) -> Result<f64, HarnessError> {
    if flags.is_empty() {
        return Err(MetricError::NoPositives.into());
    }
    Ok(flags.iter().filter(|f| **f == 1).count() as f64 / flags.len() as f64)
}
