//! Re-adapting the base detector after a reactance perturbation.

use thiserror::Error;

use crate::attack::{build_dataset, AttackConfig, AttackError, Dataset};
use crate::detector::{train, DetectorError, DetectorModel, TrainConfig, TrainReport};
use crate::estimation::{calibrate_threshold, EstimationError, MeasurementSystem, SystemError};
use crate::seed;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// Measurement system under new reactances with its own calibrated BDD
/// threshold.
pub fn perturbed_system(
    system: &MeasurementSystem,
    reactances: &[f64],
    fpr: f64,
    calibration_samples: usize,
    seed: u64,
) -> Result<MeasurementSystem, AdaptError> {
    let mut next = system.with_reactances(reactances)?;
    calibrate_threshold(&mut next, fpr, calibration_samples, &mut seed::child_rng(seed, "calibrate", 0))?;
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct Adaptation {
    pub model: DetectorModel,
    pub report: TrainReport,
    pub data: Dataset,
}

/// Regenerates clean and FDIA data under the perturbed system and retrains
/// a copy of the base model on it, starting from the base weights and
/// keeping the base standardizer.
pub fn adapt_base_model(
    base: &DetectorModel,
    perturbed: &MeasurementSystem,
    nu: f64,
    samples_per_class: usize,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<Adaptation, AdaptError> {
    let attack = AttackConfig::new(nu, perturbed.topology().bus_count())?;
    let data = build_dataset(perturbed, &attack, samples_per_class, samples_per_class, seed::derive(seed, "adapt-data", 0))?;
    let mut model = base.clone();
    let cfg = TrainConfig { seed: seed::derive(seed, "adapt-train", 0), ..train_cfg.clone() };
    let report = train(&mut model, &data, &cfg)?;
    Ok(Adaptation { model, report, data })
}
