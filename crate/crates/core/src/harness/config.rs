//! Experiment configuration, read from TOML. Every key has a default, so an
//! empty file (or no file) gives the desk-scale 14-bus setup.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversarial::AdvConfig;
use crate::detector::TrainConfig;
use crate::estimation::{EstimationError, LoadRange, NoiseModel};
use crate::grid::{GridError, GridTopology};
use crate::physics::perturb::PerturbConfig;
use crate::physics::spa::AngleCriterion;
use crate::pool::{AdvTrainBudget, PoolConfig, WeightNoise};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path}: {msg}")]
    Read { path: String, msg: String },
    #[error("config file {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Bundled case name (`ieee14`, `ieee30`, `ieee118`) or a case file path.
    pub case: String,
    /// Power-flow model; only `dc` is supported.
    pub model: String,
    /// Overrides the case's D-FACTS branches (1-based).
    pub dfacts: Option<Vec<usize>>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { case: "ieee14".into(), model: "dc".into(), dfacts: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    pub noise_sigma: f64,
    pub fpr: f64,
    pub calibration_samples: usize,
    pub load_low: f64,
    pub load_high: f64,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self { noise_sigma: 0.02, fpr: 0.05, calibration_samples: 10_000, load_low: 0.8, load_high: 1.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// Attack sizes of the adversarial test sets.
    pub nu: Vec<f64>,
    /// Attack size of the base model's training data.
    pub train_nu: f64,
    /// Clean and attacked rows of the base dataset, each.
    pub samples_per_class: usize,
    /// Adversarial samples per test set.
    pub test_samples: usize,
    /// Upper bound on attempts per test set, as a multiple of `test_samples`.
    pub attempt_factor: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self { nu: vec![0.05, 0.1, 0.2, 0.3], train_nu: 0.05, samples_per_class: 5000, test_samples: 1000, attempt_factor: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { epochs: t.epochs, batch_size: t.batch_size, learning_rate: t.learning_rate, validation_fraction: t.validation_fraction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialSection {
    pub lambda_low: f64,
    pub lambda_high: f64,
    pub lambda0: f64,
    pub step: f64,
    pub rounds: usize,
    pub iterations: usize,
    /// Step-length cap; zero or negative disables it.
    pub max_step: f64,
}

impl Default for AdversarialSection {
    fn default() -> Self {
        let a = AdvConfig::default();
        Self {
            lambda_low: a.lambda_low,
            lambda_high: a.lambda_high,
            lambda0: a.lambda0,
            step: a.step,
            rounds: a.rounds,
            iterations: a.iterations,
            max_step: a.max_step.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    pub k: usize,
    pub p: usize,
    pub k_grid: Vec<usize>,
    pub p_grid: Vec<usize>,
    pub perturbation: f64,
    pub noise: String,
    pub nu_low: f64,
    pub nu_high: f64,
    pub samples_per_class: usize,
    pub adv_rounds: usize,
    pub adv_samples: usize,
    pub adv_epochs: usize,
}

impl Default for PoolSection {
    fn default() -> Self {
        let b = AdvTrainBudget::default();
        Self {
            k: 10,
            p: 6,
            k_grid: vec![2, 4, 6, 8, 10],
            p_grid: vec![0, 2, 4, 6],
            perturbation: 0.1,
            noise: "uniform".into(),
            nu_low: 0.05,
            nu_high: 0.3,
            samples_per_class: 2000,
            adv_rounds: b.rounds,
            adv_samples: b.samples_per_round,
            adv_epochs: b.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtdSection {
    pub spa_targets: Vec<f64>,
    pub limit: f64,
    pub starts: usize,
    pub criterion: String,
    /// Target angles for strategies (i), (ii) and (iii).
    pub strategy_spa: [f64; 3],
    /// Clean and attacked rows used to adapt the base model, each.
    pub adapt_samples_per_class: usize,
    /// Strategies evaluated by the SPA sweep: `bdd`, `i`, `ii`, `iii`.
    pub strategies: Vec<String>,
}

impl Default for MtdSection {
    fn default() -> Self {
        Self {
            spa_targets: vec![0.1, 0.15, 0.2, 0.3, 0.4],
            limit: PerturbConfig::default().limit,
            starts: PerturbConfig::default().starts,
            criterion: "largest".into(),
            strategy_spa: [0.4, 0.35, 0.15],
            adapt_samples_per_class: 5000,
            strategies: ["bdd", "i", "ii", "iii"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Replicates per experiment cell.
    pub replicates: usize,
    pub output: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, replicates: 3, output: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSection,
    pub estimator: EstimatorSection,
    pub attack: AttackSection,
    pub detector: DetectorSection,
    pub adversarial: AdversarialSection,
    pub pool: PoolSection,
    pub mtd: MtdSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.into(), msg: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), msg: e.to_string() })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if !self.grid.model.eq_ignore_ascii_case("dc") {
            return bad("grid.model must be `dc`");
        }
        if self.attack.nu.is_empty() || self.pool.k_grid.is_empty() || self.pool.p_grid.is_empty() || self.mtd.spa_targets.is_empty() {
            return bad("nu, k_grid, p_grid and spa_targets must be nonempty");
        }
        if self.attack.nu.iter().chain([&self.attack.train_nu]).any(|v| !(*v > 0.0)) {
            return bad("attack sizes must be positive");
        }
        if self.pool.k_grid.iter().any(|k| *k == 0) || self.pool.p_grid.iter().any(|p| *p > self.pool.k) {
            return bad("k_grid entries must be positive and p_grid entries at most pool.k");
        }
        if self.run.replicates == 0 || self.attack.test_samples == 0 || self.attack.attempt_factor == 0 {
            return bad("replicates, test_samples and attempt_factor must be positive");
        }
        if self.mtd.spa_targets.iter().chain(&self.mtd.strategy_spa).any(|t| !(*t > 0.0 && *t < std::f64::consts::FRAC_PI_2)) {
            return bad("SPA targets must lie in (0, π/2)");
        }
        if self.mtd.strategies.is_empty() || self.mtd.strategies.iter().any(|s| !super::experiments::STRATEGIES.contains(&s.as_str())) {
            return bad("mtd.strategies must be a nonempty subset of bdd, i, ii, iii");
        }
        self.criterion()?;
        self.weight_noise()?;
        self.pool_config(0).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.adv_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn topology(&self) -> Result<GridTopology, ConfigError> {
        let topo = GridTopology::load(&self.grid.case)?;
        match &self.grid.dfacts {
            Some(lines) => Ok(topo.with_dfacts(&lines.iter().map(|l| l.wrapping_sub(1)).collect::<Vec<_>>())?),
            None => Ok(topo),
        }
    }

    pub fn noise(&self) -> Result<NoiseModel, ConfigError> {
        Ok(NoiseModel::uniform(self.estimator.noise_sigma)?)
    }

    pub fn load_range(&self) -> Result<LoadRange, ConfigError> {
        Ok(LoadRange::new(self.estimator.load_low, self.estimator.load_high)?)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let d = &self.detector;
        TrainConfig {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            validation_fraction: d.validation_fraction,
            seed,
        }
    }

    pub fn adv_config(&self) -> AdvConfig {
        let a = &self.adversarial;
        AdvConfig {
            lambda_low: a.lambda_low,
            lambda_high: a.lambda_high,
            lambda0: a.lambda0,
            step: a.step,
            rounds: a.rounds,
            iterations: a.iterations,
            max_step: (a.max_step > 0.0).then_some(a.max_step),
        }
    }

    fn weight_noise(&self) -> Result<WeightNoise, ConfigError> {
        self.pool.noise.parse().map_err(ConfigError::Invalid)
    }

    pub fn criterion(&self) -> Result<AngleCriterion, ConfigError> {
        self.mtd.criterion.parse().map_err(ConfigError::Invalid)
    }

    pub fn pool_config(&self, seed: u64) -> PoolConfig {
        let p = &self.pool;
        PoolConfig {
            k: p.k,
            p: p.p,
            perturbation: p.perturbation,
            noise: self.weight_noise().unwrap_or_default(),
            nu_range: (p.nu_low, p.nu_high),
            samples_per_class: p.samples_per_class,
            retrain: self.train_config(0),
            adv_budget: AdvTrainBudget { rounds: p.adv_rounds, samples_per_round: p.adv_samples, epochs: p.adv_epochs },
            adv: self.adv_config(),
            seed,
        }
    }

    pub fn perturb_config(&self, seed: u64) -> PerturbConfig {
        PerturbConfig {
            limit: self.mtd.limit,
            starts: self.mtd.starts,
            criterion: self.criterion().unwrap_or_default(),
            seed,
            ..PerturbConfig::default()
        }
    }
}
