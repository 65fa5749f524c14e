//! Python bindings: grids, measurement systems, detectors, pools, physics
//! MTD and the experiment runner.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mtdgrid::adversarial::{attack_indices, AdvConfig};
use mtdgrid::attack::{build_dataset, sample_passing_clean, AttackConfig, Dataset, DatasetRow};
use mtdgrid::detector::{architecture_for, train, DetectorModel, TrainConfig};
use mtdgrid::estimation::{calibrate_threshold, LoadRange, MeasurementSystem, NoiseModel, Provenance};
use mtdgrid::grid::{write_case, GridTopology};
use mtdgrid::harness::config::ExperimentConfig;
use mtdgrid::harness::experiments::run_experiment as run_named_experiment;
use mtdgrid::physics::adapt::perturbed_system;
use mtdgrid::physics::opf::dc_opf;
use mtdgrid::physics::perturb::{cost_optimal_reactances, optimize_perturbation, PerturbConfig};
use mtdgrid::physics::spa::{principal_angles as angles, AngleCriterion};
use mtdgrid::pool::{build_pool, load_pool, save_pool, transferability_from_labels, ModelPool, PoolConfig};
use mtdgrid::seed;
use nalgebra::DMatrix;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("expected a nonempty rectangular list of rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// A DC network case.
#[pyclass(name = "Grid", module = "mtdgrid_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Grid {
    inner: GridTopology,
}

#[pymethods]
impl Grid {
    /// A bundled case (`ieee14`, `ieee30`, `ieee118`) or a case file path.
    #[staticmethod]
    fn load(spec: &str) -> PyResult<Self> {
        Ok(Self { inner: GridTopology::load(spec).map_err(value_err)? })
    }

    #[getter]
    fn bus_count(&self) -> usize {
        self.inner.bus_count()
    }

    #[getter]
    fn branch_count(&self) -> usize {
        self.inner.branch_count()
    }

    #[getter]
    fn measurement_count(&self) -> usize {
        self.inner.measurement_count()
    }

    /// 0-based slack bus.
    #[getter]
    fn slack(&self) -> usize {
        self.inner.slack()
    }

    /// 0-based D-FACTS branch indices.
    #[getter]
    fn dfacts(&self) -> Vec<usize> {
        self.inner.dfacts().to_vec()
    }

    #[getter]
    fn reactances(&self) -> Vec<f64> {
        self.inner.reactances()
    }

    #[getter]
    fn base_loads_mw(&self) -> Vec<f64> {
        self.inner.base_loads_mw().to_vec()
    }

    fn with_dfacts(&self, lines: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_dfacts(&lines).map_err(value_err)? })
    }

    /// Measurement matrix `H` as a list of rows.
    #[pyo3(signature = (reactances=None))]
    fn jacobian(&self, reactances: Option<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = reactances.unwrap_or_else(|| self.inner.reactances());
        Ok(to_rows(self.inner.jacobian(&x).map_err(value_err)?.matrix()))
    }

    #[pyo3(signature = (loads_mw=None, reactances=None))]
    fn dc_opf<'py>(&self, py: Python<'py>, loads_mw: Option<Vec<f64>>, reactances: Option<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let loads = loads_mw.unwrap_or_else(|| self.inner.base_loads_mw().to_vec());
        let x = reactances.unwrap_or_else(|| self.inner.reactances());
        let sol = dc_opf(&self.inner, &loads, &x).map_err(runtime_err)?;
        let d = PyDict::new(py);
        d.set_item("cost", sol.cost)?;
        d.set_item("dispatch_mw", sol.dispatch_mw)?;
        d.set_item("bus_angles", sol.bus_angles)?;
        d.set_item("flows_mw", sol.flows_mw)?;
        Ok(d)
    }

    /// Cheapest D-FACTS setting within `nominal·(1 ± limit)` at base load.
    #[pyo3(signature = (limit=0.8, starts=50, seed=0))]
    fn cost_optimal_reactances(&self, limit: f64, starts: usize, seed: u64) -> PyResult<Vec<f64>> {
        let cfg = PerturbConfig { limit, starts, seed, ..PerturbConfig::default() };
        cost_optimal_reactances(&self.inner, self.inner.base_loads_mw(), &cfg).map_err(runtime_err)
    }

    /// Cheapest perturbation of `base` whose subspace angle reaches `target`.
    #[pyo3(signature = (base, target, limit=0.8, starts=50, criterion="largest", seed=0))]
    fn optimize_perturbation<'py>(
        &self,
        py: Python<'py>,
        base: Vec<f64>,
        target: f64,
        limit: f64,
        starts: usize,
        criterion: &str,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let criterion: AngleCriterion = criterion.parse().map_err(PyValueError::new_err)?;
        let cfg = PerturbConfig { limit, starts, criterion, seed, ..PerturbConfig::default() };
        let p = optimize_perturbation(&self.inner, &base, self.inner.base_loads_mw(), target, &cfg).map_err(runtime_err)?;
        let d = PyDict::new(py);
        d.set_item("target", p.target)?;
        d.set_item("spa", p.spa)?;
        d.set_item("smallest_angle", p.smallest_angle)?;
        d.set_item("largest_angle", p.largest_angle)?;
        d.set_item("reactances", p.reactances)?;
        d.set_item("delta_x", p.delta_x)?;
        d.set_item("cost_before", p.cost_before)?;
        d.set_item("cost_after", p.cost_after)?;
        d.set_item("relative_increase", p.relative_increase)?;
        Ok(d)
    }

    fn to_case(&self) -> String {
        write_case(&self.inner)
    }
}

/// Grid, WLS estimator and calibrated bad data detector at one reactance
/// setting.
#[pyclass(name = "System", module = "mtdgrid_py", skip_from_py_object)]
#[derive(Clone)]
pub struct System {
    inner: MeasurementSystem,
    calibration_samples: usize,
}

#[pymethods]
impl System {
    #[new]
    #[pyo3(signature = (grid, reactances=None, noise_sigma=0.02, fpr=0.05, calibration_samples=10000, seed=0))]
    fn new(grid: &Grid, reactances: Option<Vec<f64>>, noise_sigma: f64, fpr: f64, calibration_samples: usize, seed: u64) -> PyResult<Self> {
        let x = reactances.unwrap_or_else(|| grid.inner.reactances());
        let noise = NoiseModel::uniform(noise_sigma).map_err(value_err)?;
        let mut inner = MeasurementSystem::new(&grid.inner, &x, noise, LoadRange::default()).map_err(value_err)?;
        calibrate_threshold(&mut inner, fpr, calibration_samples, &mut seed::child_rng(seed, "calibrate", 0)).map_err(value_err)?;
        Ok(Self { inner, calibration_samples })
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold()
    }

    #[getter]
    fn reactances(&self) -> Vec<f64> {
        self.inner.reactances().to_vec()
    }

    #[getter]
    fn measurement_count(&self) -> usize {
        self.inner.jacobian().measurement_count()
    }

    fn estimate(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.estimator().estimate(&z).map_err(value_err)
    }

    fn residual(&self, z: Vec<f64>) -> PyResult<f64> {
        self.inner.residual(&z).map_err(value_err)
    }

    fn bdd_alarm(&self, z: Vec<f64>) -> PyResult<bool> {
        self.inner.bdd_alarm(&z).map_err(value_err)
    }

    /// The same grid at new reactances, recalibrated.
    #[pyo3(signature = (reactances, seed=0))]
    fn with_reactances(&self, reactances: Vec<f64>, seed: u64) -> PyResult<Self> {
        let inner = perturbed_system(&self.inner, &reactances, self.inner.config().fpr, self.calibration_samples, seed).map_err(runtime_err)?;
        Ok(Self { inner, calibration_samples: self.calibration_samples })
    }

    /// A clean measurement that passes the BDD.
    #[pyo3(signature = (seed, index=0))]
    fn sample_clean(&self, seed: u64, index: u64) -> PyResult<Vec<f64>> {
        Ok(sample_passing_clean(&self.inner, seed, "python", index).map_err(runtime_err)?.z)
    }

    /// Labeled clean and FDIA rows: `(rows, labels)`.
    #[pyo3(signature = (nu, n_clean, n_attacked, seed=0))]
    fn dataset(&self, nu: f64, n_clean: usize, n_attacked: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<u8>)> {
        let attack = AttackConfig::new(nu, self.inner.topology().bus_count()).map_err(value_err)?;
        let data = build_dataset(&self.inner, &attack, n_clean, n_attacked, seed).map_err(runtime_err)?;
        let labels = data.labels();
        Ok((data.rows.into_iter().map(|r| r.z).collect(), labels))
    }

    /// One CW attack against `detector`, or `None` when the plain FDIA
    /// already evades it.
    #[pyo3(signature = (detector, nu, seed=0, index=0))]
    fn attack<'py>(&self, py: Python<'py>, detector: &Detector, nu: f64, seed: u64, index: u64) -> PyResult<Option<Bound<'py, PyDict>>> {
        let attack = AttackConfig::new(nu, self.inner.topology().bus_count()).map_err(value_err)?;
        let mut out = attack_indices(&self.inner, &detector.inner, &attack, &AdvConfig::default(), seed, "python", index..index + 1).map_err(runtime_err)?;
        let Some(s) = out.pop().flatten() else { return Ok(None) };
        let d = PyDict::new(py);
        d.set_item("z_a", s.attacked.z_a.clone())?;
        d.set_item("a", s.attacked.attack.a.clone())?;
        d.set_item("z_adv", s.result.z_adv.clone())?;
        d.set_item("delta_c", s.result.delta_c.clone())?;
        d.set_item("success", s.result.success)?;
        d.set_item("cai", s.cai)?;
        Ok(Some(d))
    }
}

/// Multilayer perceptron FDIA detector with its input standardizer.
#[pyclass(name = "Detector", module = "mtdgrid_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Detector {
    inner: DetectorModel,
}

#[pymethods]
impl Detector {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: DetectorModel::load(path.as_ref()).map_err(value_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(runtime_err)
    }

    /// Trains a fresh detector on `(rows, labels)`; returns it with the
    /// validation accuracy.
    #[staticmethod]
    #[pyo3(signature = (rows, labels, epochs=50, batch_size=64, learning_rate=1e-3, seed=0))]
    fn train(rows: Vec<Vec<f64>>, labels: Vec<u8>, epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> PyResult<(Self, f64)> {
        if rows.len() != labels.len() || rows.is_empty() {
            return Err(PyValueError::new_err("rows and labels must be nonempty and of equal length"));
        }
        let data = Dataset::new(
            rows.into_iter()
                .zip(labels)
                .map(|(z, label)| DatasetRow { z, label, provenance: if label == 1 { Provenance::Fdia } else { Provenance::Clean }, seed: 0 })
                .collect(),
        );
        let mut model = DetectorModel::init(&architecture_for(data.dim()), seed::derive(seed, "init", 0)).map_err(value_err)?;
        model.fit_standardizer(&data);
        let cfg = TrainConfig { epochs, batch_size, learning_rate, seed: seed::derive(seed, "train", 0), ..TrainConfig::default() };
        let report = train(&mut model, &data, &cfg).map_err(runtime_err)?;
        Ok((Self { inner: model }, report.validation_accuracy))
    }

    fn predict(&self, z: Vec<f64>) -> PyResult<u8> {
        self.inner.predict(&z).map_err(value_err)
    }

    /// Probability of the attack class.
    fn probability(&self, z: Vec<f64>) -> PyResult<f64> {
        Ok(self.inner.forward(&z).map_err(value_err)?.probs[1])
    }

    fn predict_batch(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<u8>> {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        self.inner.predict_batch(&refs).map_err(value_err)
    }
}

/// Majority-vote pool of diversified student detectors.
#[pyclass(name = "Pool", module = "mtdgrid_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Pool {
    inner: ModelPool,
}

#[pymethods]
impl Pool {
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Self { inner: load_pool(dir.as_ref()).map_err(value_err)? })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        save_pool(&self.inner, dir.as_ref()).map_err(runtime_err)
    }

    /// Spawns, retrains and (for the first `p`) hardens `k` students.
    #[staticmethod]
    #[pyo3(signature = (base, system, k=10, p=6, generation=0, seed=0, samples_per_class=2000))]
    fn build(base: &Detector, system: &System, k: usize, p: usize, generation: u64, seed: u64, samples_per_class: usize) -> PyResult<Self> {
        let cfg = PoolConfig { k, p, seed, samples_per_class, ..PoolConfig::default() };
        Ok(Self { inner: build_pool(&base.inner, &system.inner, &cfg, generation).map_err(runtime_err)? })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn generation(&self) -> u64 {
        self.inner.generation
    }

    fn vote(&self, z: Vec<f64>) -> PyResult<u8> {
        self.inner.vote(&z).map_err(value_err)
    }

    /// Pool verdicts and each student's labels.
    fn vote_batch(&self, rows: Vec<Vec<f64>>) -> PyResult<(Vec<u8>, Vec<Vec<u8>>)> {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        self.inner.vote_batch(&refs).map_err(value_err)
    }

    /// `(eta_av, excluded students)` over a set of adversarial rows.
    fn transferability(&self, rows: Vec<Vec<f64>>) -> PyResult<(f64, Vec<usize>)> {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let (_, per) = self.inner.vote_batch(&refs).map_err(value_err)?;
        let t = transferability_from_labels(&per).map_err(value_err)?;
        Ok((t.eta_av, t.excluded))
    }
}

/// Principal angles (radians, ascending) between the column spaces of two
/// matrices given as lists of rows.
#[pyfunction]
fn principal_angles(h1: Vec<Vec<f64>>, h2: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    angles(&matrix(&h1)?, &matrix(&h2)?).map_err(value_err)
}

/// Runs a named experiment and returns `{file name: CSV text}`.
#[pyfunction]
#[pyo3(signature = (name, config=None))]
fn run_experiment(name: &str, config: Option<&str>) -> PyResult<Vec<(String, String)>> {
    let cfg = match config {
        Some(text) => ExperimentConfig::parse(text, "<python>").map_err(value_err)?,
        None => ExperimentConfig::default(),
    };
    Ok(run_named_experiment(name, &cfg).map_err(runtime_err)?.files)
}

#[pymodule]
fn mtdgrid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Grid>()?;
    m.add_class::<System>()?;
    m.add_class::<Detector>()?;
    m.add_class::<Pool>()?;
    m.add_function(wrap_pyfunction!(principal_angles, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
