//! Reactance perturbation on D-FACTS lines: find the cheapest setting whose
//! Jacobian is at least a target angle away from the current one.
//!
//! Search: multi-start projected coordinate descent. Each start is drawn
//! uniformly in the box `x_l(1 ± limit)` intersected with the device range
//! `nominal_l(1 ± limit)`; infeasible starts first climb the
//! angle by coordinate ascent. Descent then probes every coordinate and a few
//! random directions with a shrinking step, accepting a probe only if it
//! lowers the OPF cost and keeps the angle at or above the target.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::opf::{OpfError, OpfModel};
use super::spa::{principal_angles, AngleCriterion, SpaError};
use crate::grid::GridTopology;
use crate::seed;
use crate::textio::fmt_f64;

#[derive(Debug, Error)]
pub enum MtdError {
    #[error("case has no D-FACTS lines")]
    NoDfacts,
    #[error("target angle {target} unreachable within the perturbation limit (best found {best})")]
    Unreachable { target: f64, best: f64 },
    #[error("invalid perturbation settings: {0}")]
    Config(String),
    #[error(transparent)]
    Opf(#[from] OpfError),
    #[error(transparent)]
    Spa(#[from] SpaError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbConfig {
    /// Maximum relative change `|Δx_l| / x_l` on each D-FACTS line.
    pub limit: f64,
    pub starts: usize,
    pub criterion: AngleCriterion,
    /// Initial probe step as a fraction of `x_l`.
    pub initial_step: f64,
    pub min_step: f64,
    /// Random direction probes per descent sweep.
    pub random_probes: usize,
    pub max_sweeps: usize,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            limit: 0.8,
            starts: 50,
            criterion: AngleCriterion::Largest,
            initial_step: 0.1,
            min_step: 1e-3,
            random_probes: 6,
            max_sweeps: 200,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    fn validate(&self) -> Result<(), MtdError> {
        if !(self.limit > 0.0 && self.limit < 1.0) {
            return Err(MtdError::Config(format!("limit must lie in (0, 1), got {}", self.limit)));
        }
        if self.starts == 0 || !(self.initial_step > 0.0) || !(self.min_step > 0.0) {
            return Err(MtdError::Config("starts and steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtdPerturbation {
    pub target: f64,
    /// Per-branch `Δx`, zero off the D-FACTS set.
    pub delta_x: Vec<f64>,
    pub base_reactances: Vec<f64>,
    pub reactances: Vec<f64>,
    /// Angle under the configured criterion.
    pub spa: f64,
    pub smallest_angle: f64,
    pub largest_angle: f64,
    pub cost_before: f64,
    pub cost_after: f64,
    pub relative_increase: f64,
}

/// Evaluates candidate reactance settings against a fixed pre-perturbation
/// Jacobian.
struct Evaluator<'a> {
    topo: &'a GridTopology,
    loads: &'a [f64],
    h0: DMatrix<f64>,
    criterion: AngleCriterion,
}

impl Evaluator<'_> {
    fn cost(&self, x: &[f64]) -> f64 {
        OpfModel::new(self.topo, x).and_then(|m| m.solve(self.loads)).map_or(f64::INFINITY, |s| s.cost)
    }

    fn angles(&self, x: &[f64]) -> Result<Vec<f64>, MtdError> {
        let h = self.topo.jacobian(x)?;
        Ok(principal_angles(&self.h0, h.matrix())?)
    }

    fn angle(&self, x: &[f64]) -> f64 {
        self.angles(x).map_or(0.0, |a| self.criterion.select(&a))
    }
}

/// Relative tolerance when comparing an angle to the target, so a zero
/// perturbation satisfies a vanishing target.
const ANGLE_TOL: f64 = 1e-9;

struct Box<'a> {
    lines: &'a [usize],
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Box<'_> {
    fn clamp(&self, x: &mut [f64]) {
        for (k, &l) in self.lines.iter().enumerate() {
            x[l] = x[l].clamp(self.lo[k], self.hi[k]);
        }
    }
}

/// Coordinate descent of `f` over the box, only accepting points where
/// `feasible` holds. Returns the local optimum and its value.
fn descend(
    start: Vec<f64>,
    bx: &Box,
    scale: &[f64],
    cfg: &PerturbConfig,
    rng: &mut seed::Rng,
    f: &dyn Fn(&[f64]) -> f64,
    feasible: &dyn Fn(&[f64]) -> bool,
) -> (Vec<f64>, f64) {
    let mut x = start;
    let mut fx = f(&x);
    let mut step = cfg.initial_step;
    let n = bx.lines.len();
    for _ in 0..cfg.max_sweeps {
        if step < cfg.min_step {
            break;
        }
        let mut improved = false;
        let mut dirs: Vec<Vec<f64>> = (0..n)
            .flat_map(|k| {
                let mut e = vec![0.0; n];
                e[k] = 1.0;
                let neg = e.iter().map(|v| -v).collect();
                [e, neg]
            })
            .collect();
        for _ in 0..cfg.random_probes {
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let len = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dirs.push(d.iter().map(|v| v / len).collect());
        }
        for d in dirs {
            let mut y = x.clone();
            for (k, &l) in bx.lines.iter().enumerate() {
                y[l] += step * d[k] * scale[k];
            }
            bx.clamp(&mut y);
            if y == x {
                continue;
            }
            let fy = f(&y);
            if fy < fx && feasible(&y) {
                x = y;
                fx = fy;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x, fx)
}

/// Reactances on the D-FACTS lines that minimize the OPF cost within
/// `nominal(1 ± limit)`; the pre-perturbation operating point.
pub fn cost_optimal_reactances(topo: &GridTopology, loads_mw: &[f64], config: &PerturbConfig) -> Result<Vec<f64>, MtdError> {
    config.validate()?;
    let lines = topo.dfacts();
    let nominal = topo.reactances();
    if lines.is_empty() {
        return Ok(nominal);
    }
    let bx = Box {
        lines,
        lo: lines.iter().map(|&l| nominal[l] * (1.0 - config.limit)).collect(),
        hi: lines.iter().map(|&l| nominal[l] * (1.0 + config.limit)).collect(),
    };
    let scale: Vec<f64> = lines.iter().map(|&l| nominal[l]).collect();
    let cost = |x: &[f64]| OpfModel::new(topo, x).and_then(|m| m.solve(loads_mw)).map_or(f64::INFINITY, |s| s.cost);
    let starts = config.starts.div_ceil(5).max(1);
    let results: Vec<(Vec<f64>, f64)> = (0..starts as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::child_rng(config.seed, "x-star", i);
            let mut x = nominal.clone();
            if i > 0 {
                for (k, &l) in lines.iter().enumerate() {
                    x[l] = rng.random_range(bx.lo[k]..=bx.hi[k]);
                }
            }
            descend(x, &bx, &scale, config, &mut rng, &cost, &|_| true)
        })
        .collect();
    let best = results.into_iter().min_by(|a, b| a.1.partial_cmp(&b.1).unwrap()).unwrap();
    if !best.1.is_finite() {
        return Err(OpfError::Infeasible("no feasible reactance setting".into()).into());
    }
    Ok(best.0)
}

fn summarize(
    eval: &Evaluator,
    target: f64,
    base: &[f64],
    x: Vec<f64>,
    cost_before: f64,
) -> Result<MtdPerturbation, MtdError> {
    let angles = eval.angles(&x)?;
    let cost_after = eval.cost(&x);
    Ok(MtdPerturbation {
        target,
        delta_x: x.iter().zip(base).map(|(a, b)| a - b).collect(),
        base_reactances: base.to_vec(),
        spa: eval.criterion.select(&angles),
        smallest_angle: angles[0],
        largest_angle: *angles.last().unwrap(),
        cost_before,
        cost_after,
        relative_increase: (cost_after - cost_before) / cost_before,
        reactances: x,
    })
}

/// Cheapest D-FACTS setting within `base(1 ± limit)` and the device range whose angle to
/// `H(base)` is at least `target`, costed by DC-OPF at `loads_mw`.
pub fn optimize_perturbation(
    topo: &GridTopology,
    base: &[f64],
    loads_mw: &[f64],
    target: f64,
    config: &PerturbConfig,
) -> Result<MtdPerturbation, MtdError> {
    Ok(optimize_frontier(topo, base, loads_mw, &[target], config)?.remove(0))
}

/// Runs the search for every target and makes the frontier monotone: a
/// solution for a larger target is also feasible for a smaller one, so each
/// target keeps the cheapest solution found at or above it.
pub fn optimize_frontier(
    topo: &GridTopology,
    base: &[f64],
    loads_mw: &[f64],
    targets: &[f64],
    config: &PerturbConfig,
) -> Result<Vec<MtdPerturbation>, MtdError> {
    config.validate()?;
    let lines = topo.dfacts();
    if lines.is_empty() {
        return Err(MtdError::NoDfacts);
    }
    if targets.iter().any(|t| !(*t >= 0.0 && *t < std::f64::consts::FRAC_PI_2)) {
        return Err(MtdError::Config("targets must lie in [0, π/2)".into()));
    }
    topo.check_reactances(base)?;
    let eval = Evaluator { topo, loads: loads_mw, h0: topo.jacobian(base)?.matrix().clone(), criterion: config.criterion };
    let cost_before = eval.cost(base);
    if !cost_before.is_finite() {
        return Err(OpfError::Infeasible("pre-perturbation OPF is infeasible".into()).into());
    }
    // Each step stays within `limit` of the current setting and the device
    // range around nominal.
    let nominal = topo.reactances();
    let bx = Box {
        lines,
        lo: lines.iter().map(|&l| (base[l] * (1.0 - config.limit)).max(nominal[l] * (1.0 - config.limit))).collect(),
        hi: lines.iter().map(|&l| (base[l] * (1.0 + config.limit)).min(nominal[l] * (1.0 + config.limit))).collect(),
    };
    if bx.lo.iter().zip(&bx.hi).any(|(lo, hi)| lo > hi) {
        return Err(MtdError::Config("base reactances outside the D-FACTS range".into()));
    }
    let scale: Vec<f64> = lines.iter().map(|&l| base[l]).collect();
    let mut found: Vec<Option<(Vec<f64>, f64)>> = Vec::with_capacity(targets.len());
    let mut best_angle: f64 = 0.0;
    for (ti, &target) in targets.iter().enumerate() {
        let ok = |x: &[f64]| eval.angle(x) >= target - ANGLE_TOL;
        let cost = |x: &[f64]| eval.cost(x);
        let runs: Vec<(Option<(Vec<f64>, f64)>, f64)> = (0..config.starts as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = seed::child_rng(config.seed, "mtd-start", (ti as u64) << 32 | i);
                let mut x = base.to_vec();
                if i > 0 {
                    for (k, &l) in lines.iter().enumerate() {
                        x[l] = rng.random_range(bx.lo[k]..=bx.hi[k]);
                    }
                }
                let mut a = eval.angle(&x);
                if a < target - ANGLE_TOL {
                    let (y, na) = descend(x, &bx, &scale, config, &mut rng, &|x: &[f64]| {
                        // Stop climbing once the target is met.
                        (-eval.angle(x)).max(-target)
                    }, &|_| true);
                    x = y;
                    a = -na;
                }
                if a < target - ANGLE_TOL {
                    return (None, a);
                }
                let (y, c) = descend(x, &bx, &scale, config, &mut rng, &cost, &ok);
                (c.is_finite().then_some((y, c)), a)
            })
            .collect();
        for (_, a) in &runs {
            best_angle = best_angle.max(*a);
        }
        found.push(runs.into_iter().filter_map(|r| r.0).min_by(|a, b| a.1.partial_cmp(&b.1).unwrap()));
    }
    // Monotone pass from the largest target down.
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|a, b| targets[*b].partial_cmp(&targets[*a]).unwrap());
    let mut carry: Option<(Vec<f64>, f64)> = None;
    for &i in &order {
        if let Some(c) = &carry {
            if found[i].as_ref().is_none_or(|f| c.1 < f.1) {
                found[i] = Some(c.clone());
            }
        }
        if let Some(f) = &found[i] {
            if carry.as_ref().is_none_or(|c| f.1 < c.1) {
                carry = Some(f.clone());
            }
        }
    }
    targets
        .iter()
        .zip(found)
        .map(|(&target, f)| match f {
            Some((x, _)) => summarize(&eval, target, base, x, cost_before),
            None => Err(MtdError::Unreachable { target, best: best_angle }),
        })
        .collect()
}

/// CSV rows: target, achieved angle, smallest and largest angle, one `dx`
/// column per D-FACTS line, cost before, cost after, relative increase.
pub fn perturbation_report(topo: &GridTopology, rows: &[MtdPerturbation]) -> String {
    let mut out = String::from("target_spa,achieved_spa,smallest_angle,largest_angle");
    for &l in topo.dfacts() {
        let _ = write!(out, ",dx_{}", l + 1);
    }
    out.push_str(",cost_before,cost_after,relative_increase\n");
    for r in rows {
        let _ = write!(out, "{},{},{},{}", fmt_f64(r.target), fmt_f64(r.spa), fmt_f64(r.smallest_angle), fmt_f64(r.largest_angle));
        for &l in topo.dfacts() {
            let _ = write!(out, ",{}", fmt_f64(r.delta_x[l]));
        }
        let _ = writeln!(out, ",{},{},{}", fmt_f64(r.cost_before), fmt_f64(r.cost_after), fmt_f64(r.relative_increase));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> PerturbConfig {
        PerturbConfig { starts: 6, max_sweeps: 40, ..Default::default() }
    }

    #[test]
    fn vanishing_target_accepts_zero_perturbation() {
        let t = GridTopology::ieee14();
        let x = t.reactances();
        let r = optimize_perturbation(&t, &x, t.base_loads_mw(), 1e-12, &quick()).unwrap();
        assert!(r.relative_increase <= 1e-12);
        assert!(r.cost_after <= r.cost_before + 1e-9);
    }

    #[test]
    fn perturbations_respect_box_and_target() {
        let t = GridTopology::ieee14();
        let cfg = quick();
        let x0 = cost_optimal_reactances(&t, t.base_loads_mw(), &cfg).unwrap();
        let r = optimize_perturbation(&t, &x0, t.base_loads_mw(), 0.1, &cfg).unwrap();
        assert!(r.spa >= 0.1 - 1e-9);
        assert!(r.relative_increase >= -1e-9, "{}", r.relative_increase);
        for (l, dx) in r.delta_x.iter().enumerate() {
            if t.dfacts().contains(&l) {
                assert!(dx.abs() <= cfg.limit * x0[l] + 1e-12);
            } else {
                assert_eq!(*dx, 0.0);
            }
            assert!(r.reactances[l] > 0.0);
        }
        assert!(r.smallest_angle < 1e-6);
        let report = perturbation_report(&t, &[r]);
        assert!(report.starts_with("target_spa,achieved_spa,smallest_angle,largest_angle,dx_1,dx_5,"));
        assert_eq!(report.lines().count(), 2);
    }

    #[test]
    fn unreachable_targets_and_missing_dfacts() {
        let t = GridTopology::ieee14();
        let cfg = PerturbConfig { limit: 0.05, ..quick() };
        assert!(matches!(
            optimize_perturbation(&t, &t.reactances(), t.base_loads_mw(), 1.2, &cfg),
            Err(MtdError::Unreachable { .. })
        ));
        let t30 = GridTopology::bundled("ieee30").unwrap();
        assert!(matches!(
            optimize_perturbation(&t30, &t30.reactances(), t30.base_loads_mw(), 0.1, &cfg),
            Err(MtdError::NoDfacts)
        ));
    }
}
