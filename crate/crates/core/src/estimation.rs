//! DC measurements, weighted least-squares state estimation and the
//! residual-based bad data detector.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::grid::{GridTopology, JacobianMatrix, BASE_MVA};
use crate::physics::opf::{OpfError, OpfModel};

/// Bounded resampling of loads when the OPF is infeasible.
pub const MAX_LOAD_RETRIES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("normal matrix HᵀWH is singular (rank {rank} < {cols})")]
    Singular { rank: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("no feasible operating point after {MAX_LOAD_RETRIES} load draws: {0}")]
    Sampling(OpfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Clean,
    Fdia,
    Adversarial,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Clean => "clean",
            Provenance::Fdia => "fdia",
            Provenance::Adversarial => "adversarial",
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "clean" => Ok(Self::Clean),
            "fdia" => Ok(Self::Fdia),
            "adversarial" => Ok(Self::Adversarial),
            _ => Err(format!("unknown provenance `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector {
    pub z: Vec<f64>,
    pub provenance: Provenance,
}

/// Gaussian sensor noise in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    sigma: f64,
    per_sensor: Option<Vec<f64>>,
}

impl NoiseModel {
    pub fn uniform(sigma: f64) -> Result<Self, EstimationError> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(EstimationError::Invalid(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma, per_sensor: None })
    }

    pub fn per_sensor(sigmas: Vec<f64>) -> Result<Self, EstimationError> {
        if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(EstimationError::Invalid("every sensor sigma must be positive".into()));
        }
        Ok(Self { sigma: sigmas[0], per_sensor: Some(sigmas) })
    }

    pub fn sigma(&self, sensor: usize) -> f64 {
        self.per_sensor.as_ref().map_or(self.sigma, |s| s[sensor])
    }

    /// `W = diag(σ_i⁻²)` for `m` sensors.
    pub fn weights(&self, m: usize) -> Vec<f64> {
        (0..m).map(|i| self.sigma(i).powi(-2)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<f64> {
        let std = Normal::new(0.0, 1.0).unwrap();
        (0..m).map(|i| self.sigma(i) * std.sample(rng)).collect()
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { sigma: 0.02, per_sensor: None }
    }
}

/// Detector settings: the weights plus the calibrated alarm threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub weights: Vec<f64>,
    pub fpr: f64,
    pub threshold: f64,
}

/// WLS estimator with the gain matrix factorized once.
#[derive(Debug, Clone)]
pub struct StateEstimator {
    jac: JacobianMatrix,
    weights: Vec<f64>,
    gain: Cholesky<f64, Dyn>,
}

impl StateEstimator {
    pub fn new(jac: JacobianMatrix, weights: Vec<f64>) -> Result<Self, EstimationError> {
        let m = jac.measurement_count();
        if weights.len() != m {
            return Err(EstimationError::Dimension { expected: m, got: weights.len() });
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(EstimationError::Invalid("weights must be positive".into()));
        }
        let h = jac.matrix();
        let wh = DMatrix::from_fn(m, h.ncols(), |i, j| weights[i] * h[(i, j)]);
        let g = h.transpose() * wh;
        let gain = match g.clone().cholesky() {
            Some(c) => c,
            None => {
                let sv = g.singular_values();
                let smax = sv.max();
                let rank = sv.iter().filter(|s| **s > smax * 1e-12).count();
                return Err(EstimationError::Singular { rank, cols: h.ncols() });
            }
        };
        Ok(Self { jac, weights, gain })
    }

    pub fn jacobian(&self) -> &JacobianMatrix {
        &self.jac
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `θ̂ = (HᵀWH)⁻¹HᵀWz` via the cached Cholesky factor.
    pub fn estimate(&self, z: &[f64]) -> Result<Vec<f64>, EstimationError> {
        let m = self.jac.measurement_count();
        if z.len() != m {
            return Err(EstimationError::Dimension { expected: m, got: z.len() });
        }
        let wz: Vec<f64> = z.iter().zip(&self.weights).map(|(z, w)| z * w).collect();
        let rhs = DVector::from_vec(self.jac.apply_transpose(&wz));
        Ok(self.gain.solve(&rhs).as_slice().to_vec())
    }

    pub fn residual(&self, z: &[f64]) -> Result<f64, EstimationError> {
        let theta = self.estimate(z)?;
        Ok(residual(z, &self.jac, &theta))
    }
}

/// One-shot WLS estimate.
pub fn wls_estimate(jac: &JacobianMatrix, weights: &[f64], z: &[f64]) -> Result<Vec<f64>, EstimationError> {
    StateEstimator::new(jac.clone(), weights.to_vec())?.estimate(z)
}

/// `‖z − Hθ̂‖₂`.
pub fn residual(z: &[f64], jac: &JacobianMatrix, theta_hat: &[f64]) -> f64 {
    let fit = jac.apply(theta_hat);
    z.iter().zip(&fit).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Alarm iff `r ≥ τ`.
pub fn bdd_detect(r: f64, tau: f64) -> bool {
    r >= tau
}

/// Uniform per-bus load scaling interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadRange {
    pub low: f64,
    pub high: f64,
}

impl LoadRange {
    pub fn new(low: f64, high: f64) -> Result<Self, EstimationError> {
        if !(low > 0.0) || !(high >= low) || !high.is_finite() {
            return Err(EstimationError::Invalid(format!("bad load range [{low}, {high}]")));
        }
        Ok(Self { low, high })
    }
}

impl Default for LoadRange {
    fn default() -> Self {
        Self { low: 0.8, high: 1.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub loads_mw: Vec<f64>,
    pub dispatch_mw: Vec<f64>,
    /// Non-slack bus angles (radians).
    pub state: Vec<f64>,
}

/// Draws per-bus loads, dispatches them by DC-OPF and solves for the angles.
pub fn sample_operating_point<R: Rng + ?Sized>(
    topo: &GridTopology,
    opf: &OpfModel,
    range: LoadRange,
    rng: &mut R,
) -> Result<OperatingPoint, EstimationError> {
    let mut last_err = None;
    for _ in 0..MAX_LOAD_RETRIES {
        let loads: Vec<f64> = topo
            .base_loads_mw()
            .iter()
            .map(|&l| if range.high > range.low { l * rng.random_range(range.low..range.high) } else { l * range.low })
            .collect();
        match opf.solve(&loads) {
            Ok(sol) => {
                let state = sol
                    .bus_angles
                    .iter()
                    .enumerate()
                    .filter(|(b, _)| *b != topo.slack())
                    .map(|(_, a)| *a)
                    .collect();
                return Ok(OperatingPoint { loads_mw: loads, dispatch_mw: sol.dispatch_mw, state });
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(EstimationError::Sampling(last_err.expect("at least one attempt")))
}

/// `z = Hθ + e`.
pub fn measure<R: Rng + ?Sized>(jac: &JacobianMatrix, state: &[f64], noise: &NoiseModel, rng: &mut R) -> MeasurementVector {
    let mut z = jac.apply(state);
    for (zi, e) in z.iter_mut().zip(noise.sample(jac.measurement_count(), rng)) {
        *zi += e;
    }
    MeasurementVector { z, provenance: Provenance::Clean }
}

/// Empirical `(1 − fpr)` quantile of a set of clean residuals: the
/// `⌈(1 − fpr)·n⌉`-th order statistic.
pub fn quantile_threshold(mut residuals: Vec<f64>, fpr: f64) -> f64 {
    residuals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = residuals.len();
    let k = ((1.0 - fpr) * n as f64).ceil() as usize;
    residuals[k.clamp(1, n) - 1]
}

/// Converts MW to per-unit on the system base.
pub fn to_pu(mw: f64) -> f64 {
    mw / BASE_MVA
}

/// Everything the operator needs to produce and screen measurements for one
/// reactance setting.
#[derive(Debug, Clone)]
pub struct MeasurementSystem {
    topology: GridTopology,
    opf: OpfModel,
    estimator: StateEstimator,
    noise: NoiseModel,
    load_range: LoadRange,
    config: EstimatorConfig,
}

impl MeasurementSystem {
    /// Builds an uncalibrated system (threshold `+∞` until [`calibrate_threshold`]).
    pub fn new(
        topology: &GridTopology,
        reactances: &[f64],
        noise: NoiseModel,
        load_range: LoadRange,
    ) -> Result<Self, SystemError> {
        let jac = topology.jacobian(reactances)?;
        let weights = noise.weights(jac.measurement_count());
        let estimator = StateEstimator::new(jac, weights.clone())?;
        let opf = OpfModel::new(topology, reactances)?;
        Ok(Self {
            topology: topology.clone(),
            opf,
            estimator,
            noise,
            load_range,
            config: EstimatorConfig { weights, fpr: 0.0, threshold: f64::INFINITY },
        })
    }

    /// Same operator settings under new reactances; the threshold must be
    /// recalibrated.
    pub fn with_reactances(&self, reactances: &[f64]) -> Result<Self, SystemError> {
        Self::new(&self.topology, reactances, self.noise.clone(), self.load_range)
    }

    pub fn topology(&self) -> &GridTopology {
        &self.topology
    }
    pub fn jacobian(&self) -> &JacobianMatrix {
        self.estimator.jacobian()
    }
    pub fn reactances(&self) -> &[f64] {
        self.opf.reactances()
    }
    pub fn opf(&self) -> &OpfModel {
        &self.opf
    }
    pub fn estimator(&self) -> &StateEstimator {
        &self.estimator
    }
    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    pub fn load_range(&self) -> LoadRange {
        self.load_range
    }
    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }
    pub fn threshold(&self) -> f64 {
        self.config.threshold
    }
    pub fn set_threshold(&mut self, fpr: f64, threshold: f64) {
        self.config.fpr = fpr;
        self.config.threshold = threshold;
    }

    /// Draws an operating point and its noisy clean measurement.
    pub fn sample_clean<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(OperatingPoint, MeasurementVector), EstimationError> {
        let op = sample_operating_point(&self.topology, &self.opf, self.load_range, rng)?;
        let z = measure(self.jacobian(), &op.state, &self.noise, rng);
        Ok((op, z))
    }

    pub fn residual(&self, z: &[f64]) -> Result<f64, EstimationError> {
        self.estimator.residual(z)
    }

    pub fn bdd_alarm(&self, z: &[f64]) -> Result<bool, EstimationError> {
        Ok(bdd_detect(self.residual(z)?, self.config.threshold))
    }
}

#[derive(Debug, Error)]
pub enum SystemError {
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Opf(#[from] OpfError),
}

/// Sets `τ` to the empirical `(1 − fpr)` quantile of residuals over
/// `n_samples` clean measurements and returns it.
pub fn calibrate_threshold<R: Rng + ?Sized>(
    system: &mut MeasurementSystem,
    fpr: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64, EstimationError> {
    if !(fpr > 0.0 && fpr < 1.0) {
        return Err(EstimationError::Invalid(format!("fpr must lie in (0, 1), got {fpr}")));
    }
    if n_samples < 1000 {
        return Err(EstimationError::Invalid(format!("need at least 1000 calibration samples, got {n_samples}")));
    }
    let mut residuals = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (_, z) = system.sample_clean(rng)?;
        residuals.push(system.residual(&z.z)?);
    }
    let tau = quantile_threshold(residuals, fpr);
    system.set_threshold(fpr, tau);
    Ok(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{parse_case, GridTopology};
    use crate::seed;
    use approx::assert_relative_eq;

    fn random_grid(rng: &mut seed::Rng) -> GridTopology {
        // 3-bus triangle with random reactances.
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..0.5)).collect();
        parse_case(&format!(
            "[slack]\n1\n[bus]\n1 0\n2 40\n3 60\n[branch]\n1 2 {} 500\n2 3 {} 500\n1 3 {} 500\n[gen]\n1 0.01 10 0 300\n",
            x[0], x[1], x[2]
        ))
        .unwrap()
    }

    #[test]
    fn noiseless_and_shifted_recovery() {
        let t = GridTopology::ieee14();
        let jac = t.jacobian(&t.reactances()).unwrap();
        let est = StateEstimator::new(jac.clone(), NoiseModel::default().weights(54)).unwrap();
        let mut rng = seed::rng(1);
        let theta: Vec<f64> = (0..13).map(|_| rng.random_range(-0.3..0.3)).collect();
        let c: Vec<f64> = (0..13).map(|_| rng.random_range(-0.1..0.1)).collect();
        let z = jac.apply(&theta);
        let th = est.estimate(&z).unwrap();
        for (a, b) in th.iter().zip(&theta) {
            assert_relative_eq!(a, b, epsilon = 1e-10, max_relative = 1e-10);
        }
        let hc = jac.apply(&c);
        let za: Vec<f64> = z.iter().zip(&hc).map(|(a, b)| a + b).collect();
        let tha = est.estimate(&za).unwrap();
        for i in 0..13 {
            assert_relative_eq!(tha[i], theta[i] + c[i], epsilon = 1e-10);
        }
        assert!(est.residual(&z).unwrap() <= 1e-9);
        // Idempotence.
        let again = est.estimate(&jac.apply(&th)).unwrap();
        for (a, b) in again.iter().zip(&th) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn matches_explicit_inverse_oracle() {
        let mut rng = seed::rng(5);
        for _ in 0..20 {
            let t = random_grid(&mut rng);
            let jac = t.jacobian(&t.reactances()).unwrap();
            let w: Vec<f64> = (0..jac.measurement_count()).map(|_| rng.random_range(0.5..3.0)).collect();
            let z: Vec<f64> = (0..jac.measurement_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = jac.matrix();
            let wm = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
            let oracle = (h.transpose() * &wm * h).try_inverse().unwrap() * h.transpose() * &wm * DVector::from_vec(z.clone());
            let got = wls_estimate(&jac, &w, &z).unwrap();
            for (a, b) in got.iter().zip(oracle.iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-8, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn residual_scales_with_measurement() {
        let t = GridTopology::ieee14();
        let jac = t.jacobian(&t.reactances()).unwrap();
        let est = StateEstimator::new(jac.clone(), vec![1.0; 54]).unwrap();
        let mut rng = seed::rng(2);
        let z = measure(&jac, &[0.1; 13], &NoiseModel::default(), &mut rng).z;
        let th = est.estimate(&z).unwrap();
        let r = residual(&z, &jac, &th);
        let zk: Vec<f64> = z.iter().map(|v| v * 3.0).collect();
        let thk: Vec<f64> = th.iter().map(|v| v * 3.0).collect();
        assert_relative_eq!(residual(&zk, &jac, &thk), 3.0 * r, max_relative = 1e-12);
    }

    #[test]
    fn bdd_boundary() {
        assert!(bdd_detect(1.5, 1.5));
        assert!(!bdd_detect(0.0, 0.1));
        assert!(bdd_detect(1.5 + 1e-12, 1.5));
    }

    #[test]
    fn operating_point_two_bus() {
        let t = parse_case("[slack]\n1\n[bus]\n1 0\n2 100\n[branch]\n1 2 0.5 500\n[gen]\n1 0.01 10 0 300\n").unwrap();
        let opf = OpfModel::new(&t, &t.reactances()).unwrap();
        let mut rng = seed::rng(0);
        let op = sample_operating_point(&t, &opf, LoadRange::new(1.0, 1.0).unwrap(), &mut rng).unwrap();
        assert_eq!(op.loads_mw, vec![0.0, 100.0]);
        assert_relative_eq!(op.state[0], -0.5, epsilon = 1e-12);
        assert_relative_eq!(op.dispatch_mw[0], 100.0, epsilon = 1e-9);
    }

    #[test]
    fn sampled_points_balance_power() {
        let t = GridTopology::ieee14();
        let opf = OpfModel::new(&t, &t.reactances()).unwrap();
        let mut rng = seed::rng(3);
        for _ in 0..20 {
            let op = sample_operating_point(&t, &opf, LoadRange::default(), &mut rng).unwrap();
            let gen: f64 = op.dispatch_mw.iter().sum();
            let load: f64 = op.loads_mw.iter().sum();
            assert_relative_eq!(gen, load, epsilon = 1e-8);
            for (l, base) in op.loads_mw.iter().zip(t.base_loads_mw()) {
                assert!(*l >= 0.8 * base - 1e-12 && *l <= 1.2 * base + 1e-12);
            }
        }
    }

    #[test]
    fn measurement_noise_statistics() {
        let t = GridTopology::ieee14();
        let jac = t.jacobian(&t.reactances()).unwrap();
        let noise = NoiseModel::uniform(0.02).unwrap();
        let mut rng = seed::rng(9);
        let theta = vec![0.05; 13];
        let clean = jac.apply(&theta);
        let draws = 100_000 / 54 + 1;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0.0;
        for _ in 0..draws {
            let z = measure(&jac, &theta, &noise, &mut rng).z;
            for (a, b) in z.iter().zip(&clean) {
                let e = a - b;
                sum += e;
                sq += e * e;
                n += 1.0;
            }
        }
        let std = (sq / n - (sum / n).powi(2)).sqrt();
        assert!((0.0199..=0.0201).contains(&std), "std {std}");
        let a = measure(&jac, &theta, &noise, &mut seed::rng(4));
        let b = measure(&jac, &theta, &noise, &mut seed::rng(4));
        assert_eq!(a, b);
    }

    #[test]
    fn residual_follows_chi_square() {
        // r²/σ² ~ χ²(M − (N−1)); mean within 2%.
        let t = GridTopology::ieee14();
        let jac = t.jacobian(&t.reactances()).unwrap();
        let noise = NoiseModel::uniform(0.02).unwrap();
        let est = StateEstimator::new(jac.clone(), noise.weights(54)).unwrap();
        let mut rng = seed::rng(21);
        let trials = 10_000;
        let mean: f64 = (0..trials)
            .map(|_| {
                let z = measure(&jac, &[0.0; 13], &noise, &mut rng).z;
                est.residual(&z).unwrap().powi(2) / 0.02f64.powi(2)
            })
            .sum::<f64>()
            / trials as f64;
        assert!((mean / 41.0 - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn quantile_definition() {
        let r: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        assert_eq!(quantile_threshold(r.clone(), 0.5), 50.0);
        assert_eq!(quantile_threshold(r.clone(), 0.05), 95.0);
        let mut prev = f64::INFINITY;
        for a in [0.01, 0.05, 0.1, 0.3, 0.5, 0.9] {
            let t = quantile_threshold(r.clone(), a);
            assert!(t <= prev);
            prev = t;
        }
    }

    #[test]
    fn calibrated_fpr_holds_out() {
        let t = GridTopology::ieee14();
        let mut sys = MeasurementSystem::new(&t, &t.reactances(), NoiseModel::default(), LoadRange::default()).unwrap();
        let tau = calibrate_threshold(&mut sys, 0.05, 10_000, &mut seed::rng(11)).unwrap();
        assert!(tau > 0.0);
        let mut rng = seed::rng(12);
        let alarms = (0..10_000).filter(|_| sys.bdd_alarm(&sys.sample_clean(&mut rng).unwrap().1.z).unwrap()).count();
        let rate = alarms as f64 / 10_000.0;
        assert!((rate - 0.05).abs() <= 0.01, "fpr {rate}");
        assert!(calibrate_threshold(&mut sys, 0.05, 10, &mut rng).is_err());
    }

    #[test]
    fn invalid_noise_and_singular_gain() {
        assert!(NoiseModel::uniform(0.0).is_err());
        let t = GridTopology::ieee14();
        let jac = t.jacobian(&t.reactances()).unwrap();
        assert!(matches!(StateEstimator::new(jac, vec![1.0; 3]), Err(EstimationError::Dimension { .. })));
    }
}
