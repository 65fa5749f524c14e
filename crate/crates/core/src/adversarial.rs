//! Adversarial FDIA: a Carlini-Wagner style search for a state-space
//! perturbation `δ_c` such that `z_a + H(I_c ⊙ δ_c)` is labeled normal by the
//! detector while staying inside the column space of `H`.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::attack::{sample_attacked, AttackConfig, AttackError, AttackedSample};
use crate::detector::{DetectorError, DetectorModel, Output};
use crate::estimation::MeasurementSystem;
use crate::grid::JacobianMatrix;
use crate::textio::fmt_f64;

#[derive(Debug, Error)]
pub enum AdvError {
    #[error("the detector already labels z_a as normal; nothing to evade")]
    NotDetected,
    #[error("empty sparsity mask")]
    EmptyMask,
    #[error("non-finite gradient at round {round}, iteration {iteration}")]
    NonFinite { round: usize, iteration: usize },
    #[error("invalid adversarial configuration: {0}")]
    Config(String),
    #[error("baseline attack is zero")]
    ZeroAttack,
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("adversarial file {path}: {msg}")]
    Io { path: String, msg: String },
}

/// `I_c`: which states the attacker may touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask(Vec<bool>);

impl SparsityMask {
    pub fn from_c(c: &[f64]) -> Self {
        Self(c.iter().map(|v| *v != 0.0).collect())
    }

    pub fn from_support(n: usize, support: &[usize]) -> Self {
        let mut m = vec![false; n];
        for &i in support {
            m[i] = true;
        }
        Self(m)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|b| *b)
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.0).map(|(v, m)| if *m { *v } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvConfig {
    pub lambda_low: f64,
    pub lambda_high: f64,
    pub lambda0: f64,
    pub step: f64,
    pub rounds: usize,
    pub iterations: usize,
    /// Upper bound on `‖α·∂ψ/∂δ_c‖₂` per step; `None` takes raw steps.
    pub max_step: Option<f64>,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self { lambda_low: 0.0, lambda_high: 100.0, lambda0: 0.5, step: 0.01, rounds: 5, iterations: 200, max_step: Some(0.005) }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<(), AdvError> {
        let ok = self.lambda_low < self.lambda_high
            && self.lambda_low >= 0.0
            && (self.lambda_low..=self.lambda_high).contains(&self.lambda0)
            && self.step > 0.0
            && self.rounds > 0
            && self.iterations > 0
            && self.max_step.is_none_or(|r| r > 0.0);
        if ok {
            Ok(())
        } else {
            Err(AdvError::Config(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialResult {
    /// Masked state perturbation `I_c ⊙ δ_c` of the best incumbent.
    pub delta_c: Vec<f64>,
    /// `H(I_c ⊙ δ_c)`.
    pub delta: Vec<f64>,
    pub z_adv: Vec<f64>,
    pub success: bool,
    /// `‖I_c ⊙ δ_c‖₂`, infinite without an incumbent.
    pub norm: f64,
    /// `(λ̲, λ, λ̄)` at the start of each round.
    pub lambda_trace: Vec<(f64, f64, f64)>,
    /// `D_min` after each round.
    pub dmin_trace: Vec<f64>,
}

fn margin_of(o: &Output) -> f64 {
    (o.logits[1] - o.logits[0]).max(0.0)
}

/// `g(z) = max(ρ₁ − ρ₀, 0)`.
pub fn evasion_margin(model: &DetectorModel, z: &[f64]) -> Result<f64, AdvError> {
    Ok(margin_of(&model.forward(z)?))
}

fn perturbed(z_a: &[f64], jac: &JacobianMatrix, masked: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let delta = jac.apply(masked);
    let z = z_a.iter().zip(&delta).map(|(a, d)| a + d).collect();
    (z, delta)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `ψ = ‖I_c ⊙ δ_c‖₂ + λ·g(z_a + H(I_c ⊙ δ_c))`.
pub fn objective(
    model: &DetectorModel,
    jac: &JacobianMatrix,
    z_a: &[f64],
    delta_c: &[f64],
    mask: &SparsityMask,
    lambda: f64,
) -> Result<f64, AdvError> {
    let masked = mask.apply(delta_c);
    let (z, _) = perturbed(z_a, jac, &masked);
    Ok(norm(&masked) + lambda * evasion_margin(model, &z)?)
}

/// `ψ` and `∂ψ/∂δ_c`. The norm term uses the zero subgradient at the origin
/// and the margin term contributes nothing where `g = 0`.
pub fn objective_gradient(
    model: &DetectorModel,
    jac: &JacobianMatrix,
    z_a: &[f64],
    delta_c: &[f64],
    mask: &SparsityMask,
    lambda: f64,
) -> Result<(f64, Vec<f64>), AdvError> {
    let masked = mask.apply(delta_c);
    let (z, _) = perturbed(z_a, jac, &masked);
    let (g, gz) = model.input_gradient(&z, |o| {
        let m = o.logits[1] - o.logits[0];
        if m > 0.0 {
            (m, [-1.0, 1.0])
        } else {
            (0.0, [0.0, 0.0])
        }
    })?;
    let n = norm(&masked);
    let back = jac.apply_transpose(&gz);
    let grad = (0..delta_c.len())
        .map(|i| {
            if !mask.contains(i) {
                return 0.0;
            }
            let dn = if n > 0.0 { masked[i] / n } else { 0.0 };
            dn + lambda * back[i]
        })
        .collect();
    Ok((n + lambda * g, grad))
}

/// Binary search over `λ` with fixed-step gradient descent inside each
/// round. Round 1 uses `λ₀`; afterwards `λ` bisects the bracket, which is
/// tightened from above when the round produced a feasible point and from
/// below otherwise. `δ_c` restarts from zero every round.
pub fn cw_attack(
    model: &DetectorModel,
    z_a: &[f64],
    jac: &JacobianMatrix,
    mask: &SparsityMask,
    config: &AdvConfig,
) -> Result<AdversarialResult, AdvError> {
    config.validate()?;
    if mask.is_empty() {
        return Err(AdvError::EmptyMask);
    }
    if evasion_margin(model, z_a)? <= 0.0 {
        return Err(AdvError::NotDetected);
    }
    let n = jac.state_count();
    let (mut lo, mut hi, mut lambda) = (config.lambda_low, config.lambda_high, config.lambda0);
    let mut d_min = f64::INFINITY;
    let mut best: Option<Vec<f64>> = None;
    let mut lambda_trace = Vec::with_capacity(config.rounds);
    let mut dmin_trace = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        lambda_trace.push((lo, lambda, hi));
        let mut delta_c = vec![0.0; n];
        let mut round_success = false;
        for iteration in 0..config.iterations {
            let (_, grad) = objective_gradient(model, jac, z_a, &delta_c, mask, lambda)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(AdvError::NonFinite { round, iteration });
            }
            let mut scale = config.step;
            if let Some(r) = config.max_step {
                let len = config.step * norm(&grad);
                if len > r {
                    scale *= r / len;
                }
            }
            for (d, g) in delta_c.iter_mut().zip(&grad) {
                *d -= scale * g;
            }
            let masked = mask.apply(&delta_c);
            let (z, _) = perturbed(z_a, jac, &masked);
            if evasion_margin(model, &z)? <= 0.0 {
                round_success = true;
                let dn = norm(&masked);
                if dn <= d_min {
                    d_min = dn;
                    best = Some(masked);
                }
            }
        }
        if round_success {
            hi = lambda;
        } else {
            lo = lambda;
        }
        lambda = 0.5 * (lo + hi);
        dmin_trace.push(d_min);
    }
    let success = best.is_some();
    let delta_c = best.unwrap_or_else(|| vec![0.0; n]);
    let (z_adv, delta) = perturbed(z_a, jac, &delta_c);
    Ok(AdversarialResult { delta_c, delta, z_adv, success, norm: d_min, lambda_trace, dmin_trace })
}

/// Change of attack intensity `‖a + δ‖₂ / ‖a‖₂`.
pub fn cai(a: &[f64], delta: &[f64]) -> Result<f64, AdvError> {
    let base = norm(a);
    if base == 0.0 {
        return Err(AdvError::ZeroAttack);
    }
    let sum: Vec<f64> = a.iter().zip(delta).map(|(a, d)| a + d).collect();
    Ok(norm(&sum) / base)
}

/// One attempted adversarial FDIA, with everything needed to replay it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialSample {
    pub index: u64,
    pub attacked: AttackedSample,
    pub result: AdversarialResult,
    pub cai: f64,
}

impl AdversarialSample {
    /// The attacker's additive vector `a + δ`.
    pub fn injection(&self) -> Vec<f64> {
        self.attacked.attack.a.iter().zip(&self.result.delta).map(|(a, d)| a + d).collect()
    }

    /// Rebuilds the measurement on another system: the clean part re-measured
    /// there (see [`CleanSample::remeasure`]) plus `a + δ`.
    pub fn replay(&self, system: &MeasurementSystem) -> Result<Vec<f64>, AdvError> {
        let clean = self.attacked.clean.remeasure(system)?;
        Ok(clean.iter().zip(self.injection()).map(|(c, v)| c + v).collect())
    }
}

/// Attempts attacks `indices` on `system` against `model`. Entries are
/// `None` where the detector already misses the plain FDIA.
pub fn attack_indices(
    system: &MeasurementSystem,
    model: &DetectorModel,
    attack: &AttackConfig,
    config: &AdvConfig,
    seed: u64,
    tag: &str,
    indices: std::ops::Range<u64>,
) -> Result<Vec<Option<AdversarialSample>>, AdvError> {
    indices
        .into_par_iter()
        .map(|index| {
            let attacked = sample_attacked(system, attack, seed, tag, index)?;
            if model.predict(&attacked.z_a)? == 0 {
                return Ok(None);
            }
            let mask = SparsityMask::from_support(attacked.attack.c.len(), &attacked.attack.support);
            let result = cw_attack(model, &attacked.z_a, system.jacobian(), &mask, config)?;
            let cai = cai(&attacked.attack.a, &result.delta)?;
            Ok(Some(AdversarialSample { index, attacked, result, cai }))
        })
        .collect()
}

/// Keeps attacking fresh indices until `n` successful adversarial samples
/// exist (or `max_attempts` indices were used). Returns the successes in
/// index order and the number of indices consumed.
pub fn collect_successful(
    system: &MeasurementSystem,
    model: &DetectorModel,
    attack: &AttackConfig,
    config: &AdvConfig,
    seed: u64,
    tag: &str,
    n: usize,
    max_attempts: u64,
) -> Result<(Vec<AdversarialSample>, u64), AdvError> {
    let mut out = Vec::with_capacity(n);
    let mut next = 0u64;
    while out.len() < n && next < max_attempts {
        let missing = (n - out.len()) as u64;
        let chunk = (missing + missing / 4 + 8).min(max_attempts - next);
        for s in attack_indices(system, model, attack, config, seed, tag, next..next + chunk)?.into_iter().flatten() {
            if s.result.success && out.len() < n {
                out.push(s);
            }
        }
        next += chunk;
    }
    Ok((out, next))
}

/// CSV: measurement columns, `label` (always 1), `provenance`, `seed`, then
/// `nu`, `cai`, `success` and `delta_c_norm`.
pub fn adversarial_csv(samples: &[AdversarialSample]) -> String {
    let m = samples.first().map_or(0, |s| s.result.z_adv.len());
    let mut out = String::new();
    for i in 0..m {
        let _ = write!(out, "z{i},");
    }
    out.push_str("label,provenance,seed,nu,cai,success,delta_c_norm\n");
    for s in samples {
        for v in &s.result.z_adv {
            out.push_str(&fmt_f64(*v));
            out.push(',');
        }
        let dn = if s.result.success { s.result.norm } else { 0.0 };
        let _ = writeln!(
            out,
            "1,adversarial,{},{},{},{},{}",
            s.attacked.clean.seed,
            fmt_f64(s.attacked.attack.nu),
            fmt_f64(s.cai),
            u8::from(s.result.success),
            fmt_f64(dn)
        );
    }
    out
}

pub fn write_adversarial_csv(samples: &[AdversarialSample], path: &Path) -> Result<(), AdvError> {
    std::fs::write(path, adversarial_csv(samples)).map_err(|e| AdvError::Io { path: path.display().to_string(), msg: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorModel;
    use crate::grid::GridTopology;
    use crate::seed;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::Rng;

    fn setup(seed: u64) -> (DetectorModel, JacobianMatrix) {
        let t = GridTopology::ieee14();
        let jac = t.jacobian(&t.reactances()).unwrap();
        let mut m = DetectorModel::init(&[54, 20, 10, 2], seed).unwrap();
        m.standardizer.std = vec![2.0; 54];
        (m, jac)
    }

    #[test]
    fn margin_examples() {
        let (mut m, _) = setup(1);
        // Force logits (1, 3) with a zero last-layer weight matrix.
        let last = m.params.layers.len() - 1;
        m.params.layers[last].w.fill(0.0);
        m.params.layers[last].b = DVector::from_vec(vec![1.0, 3.0]);
        assert_eq!(evasion_margin(&m, &[0.0; 54]).unwrap(), 2.0);
        m.params.layers[last].b = DVector::from_vec(vec![3.0, 3.0]);
        assert_eq!(evasion_margin(&m, &[0.0; 54]).unwrap(), 0.0);
        m.params.layers[last].b = DVector::from_vec(vec![3.0, 1.0]);
        assert_eq!(evasion_margin(&m, &[0.0; 54]).unwrap(), 0.0);
    }

    #[test]
    fn objective_special_cases() {
        let (m, jac) = setup(2);
        let mut rng = seed::rng(3);
        let z: Vec<f64> = (0..54).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = SparsityMask::from_support(13, &[1, 4, 7]);
        let zero = vec![0.0; 13];
        let g = evasion_margin(&m, &z).unwrap();
        assert_relative_eq!(objective(&m, &jac, &z, &zero, &mask, 2.5).unwrap(), 2.5 * g);
        let d: Vec<f64> = (0..13).map(|i| i as f64 * 0.1).collect();
        let masked_norm = (0.01f64 + 0.16 + 0.49).sqrt();
        assert_relative_eq!(objective(&m, &jac, &z, &d, &mask, 0.0).unwrap(), masked_norm, epsilon = 1e-12);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut worst: f64 = 0.0;
        let mut probes = 0;
        let mut rng = seed::rng(17);
        while probes < 100 {
            let (m, jac) = setup(probes as u64 + 100);
            let z: Vec<f64> = (0..54).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mask = SparsityMask::from_support(13, &[0, 2, 3, 9, 12]);
            let d: Vec<f64> = (0..13).map(|_| rng.random_range(-0.05..0.05)).collect();
            let lambda = rng.random_range(0.1..5.0);
            let masked = mask.apply(&d);
            let (zp, _) = perturbed(&z, &jac, &masked);
            if evasion_margin(&m, &zp).unwrap() < 1e-3 {
                continue;
            }
            probes += 1;
            let (_, g) = objective_gradient(&m, &jac, &z, &d, &mask, lambda).unwrap();
            let h = 1e-6;
            for i in 0..13 {
                let mut dp = d.clone();
                let mut dm = d.clone();
                dp[i] += h;
                dm[i] -= h;
                let fd = (objective(&m, &jac, &z, &dp, &mask, lambda).unwrap()
                    - objective(&m, &jac, &z, &dm, &mask, lambda).unwrap())
                    / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn cai_examples() {
        let a = [1.0, -2.0, 2.0];
        assert_eq!(cai(&a, &[0.0; 3]).unwrap(), 1.0);
        assert_eq!(cai(&a, &[-1.0, 2.0, -2.0]).unwrap(), 0.0);
        assert!(matches!(cai(&[0.0; 3], &a), Err(AdvError::ZeroAttack)));
    }

    #[test]
    fn config_and_mask_validation() {
        assert!(AdvConfig { lambda_low: 5.0, lambda_high: 1.0, ..Default::default() }.validate().is_err());
        let (m, jac) = setup(5);
        let z = vec![0.0; 54];
        let empty = SparsityMask::from_support(13, &[]);
        assert!(matches!(cw_attack(&m, &z, &jac, &empty, &AdvConfig::default()), Err(AdvError::EmptyMask)));
        assert_eq!(SparsityMask::from_c(&[0.0, 0.3, 0.0]), SparsityMask::from_support(3, &[1]));
    }
}
