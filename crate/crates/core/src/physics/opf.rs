//! Lossless DC optimal power flow.
//!
//! The power-balance equality is eliminated by expressing one generator's
//! output through the others, leaving a strictly convex QP with inequality
//! constraints only (flow limits and generator bounds). That QP is solved with
//! the Goldfarb-Idnani dual active-set method, re-solving the small KKT system
//! of the working set at every step instead of updating factorizations.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::grid::{GridTopology, BASE_MVA};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpfError {
    #[error("OPF infeasible: {0}")]
    Infeasible(String),
    #[error("OPF solver failed: {0}")]
    Numerical(String),
    #[error("expected {expected} bus loads, got {got}")]
    LoadLength { expected: usize, got: usize },
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpfSolution {
    pub dispatch_mw: Vec<f64>,
    /// Bus voltage angles in radians, slack at zero.
    pub bus_angles: Vec<f64>,
    pub flows_mw: Vec<f64>,
    /// Total generation cost, currency/h.
    pub cost: f64,
    pub feasible: bool,
}

/// Quadratic program `min ½xᵀQx + cᵀx  s.t.  a_iᵀx ≥ b_i`.
#[derive(Debug, Clone)]
pub struct InequalityQp {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: Vec<DVector<f64>>,
    pub b: Vec<f64>,
}

impl InequalityQp {
    pub fn solve(&self) -> Result<DVector<f64>, OpfError> {
        let n = self.c.len();
        if n == 0 {
            return if self.b.iter().all(|&b| b <= 1e-9) {
                Ok(DVector::zeros(0))
            } else {
                Err(OpfError::Infeasible("fixed dispatch violates a constraint".into()))
            };
        }
        // Normalize rows so the tolerances below are in the units of x.
        let mut rows = Vec::with_capacity(self.a.len());
        let mut rhs = Vec::with_capacity(self.b.len());
        for (a, &b) in self.a.iter().zip(&self.b) {
            let norm = a.norm();
            if norm < 1e-14 {
                if b > 1e-9 {
                    return Err(OpfError::Infeasible("constant constraint violated".into()));
                }
                continue;
            }
            rows.push(a / norm);
            rhs.push(b / norm);
        }
        let chol = self
            .q
            .clone()
            .cholesky()
            .ok_or_else(|| OpfError::Numerical("Hessian is not positive definite".into()))?;
        let mut x = -chol.solve(&self.c);
        let qmax = self.q.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        let feas_tol = 1e-9;
        let max_iter = 50 * (rows.len() + n) + 100;

        let slack = |x: &DVector<f64>, i: usize| rows[i].dot(x) - rhs[i];
        for _ in 0..max_iter {
            let (p, s_p) = (0..rows.len())
                .map(|i| (i, slack(&x, i)))
                .fold((usize::MAX, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
            if p == usize::MAX || s_p >= -feas_tol {
                return Ok(x);
            }
            let np = &rows[p];
            let mut u_plus = u.clone();
            u_plus.push(0.0);
            let mut inner = 0;
            loop {
                inner += 1;
                if inner > max_iter {
                    return Err(OpfError::Numerical("active-set iteration limit".into()));
                }
                let (z, r) = kkt_solve(&self.q, &rows, &active, np)?;
                let mut t1 = f64::INFINITY;
                let mut drop = None;
                for (j, &rj) in r.iter().enumerate() {
                    if rj > 1e-12 {
                        let ratio = u_plus[j] / rj;
                        if ratio < t1 {
                            t1 = ratio;
                            drop = Some(j);
                        }
                    }
                }
                let zn = z.dot(np);
                let t2 = if zn <= 1e-12 * np.norm_squared() / qmax.max(1e-300) {
                    f64::INFINITY
                } else {
                    -slack(&x, p) / zn
                };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(OpfError::Infeasible("constraints cannot be satisfied".into()));
                }
                let last = u_plus.len() - 1;
                for (j, rj) in r.iter().enumerate() {
                    u_plus[j] -= t * rj;
                }
                u_plus[last] += t;
                if t2.is_finite() {
                    x += &z * t;
                }
                if t2 <= t1 {
                    active.push(p);
                    u = u_plus;
                    break;
                }
                let k = drop.expect("finite t1 has an index");
                active.remove(k);
                u_plus.remove(k);
            }
        }
        Err(OpfError::Numerical("active-set iteration limit".into()))
    }
}

/// Solves `[Q N; Nᵀ 0] [z; r] = [n; 0]` for the working set `N`.
fn kkt_solve(
    q: &DMatrix<f64>,
    rows: &[DVector<f64>],
    active: &[usize],
    np: &DVector<f64>,
) -> Result<(DVector<f64>, Vec<f64>), OpfError> {
    let n = q.nrows();
    let m = active.len();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(q);
    for (j, &i) in active.iter().enumerate() {
        for r in 0..n {
            k[(r, n + j)] = rows[i][r];
            k[(n + j, r)] = rows[i][r];
        }
    }
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(np);
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| OpfError::Numerical("singular working set".into()))?;
    let z = sol.rows(0, n).into_owned();
    let r = sol.rows(n, m).iter().copied().collect();
    Ok((z, r))
}

/// DC-OPF model for a fixed topology and reactance setting; solves for any
/// load vector.
#[derive(Debug, Clone)]
pub struct OpfModel {
    topo: GridTopology,
    reactances: Vec<f64>,
    /// Injection-to-flow sensitivities (MW per MW), `L x N`, slack column zero.
    ptdf: DMatrix<f64>,
    eliminated: usize,
}

impl OpfModel {
    pub fn new(topo: &GridTopology, reactances: &[f64]) -> Result<Self, OpfError> {
        topo.check_reactances(reactances)?;
        if topo.generators().is_empty() {
            return Err(OpfError::Infeasible("case has no generators".into()));
        }
        let b = topo.reduced_susceptance(reactances);
        let binv = b
            .cholesky()
            .ok_or_else(|| OpfError::Numerical("singular susceptance matrix".into()))?
            .inverse();
        let (l_count, n_bus) = (topo.branch_count(), topo.bus_count());
        let mut ptdf = DMatrix::zeros(l_count, n_bus);
        for (l, br) in topo.branches().iter().enumerate() {
            let y = 1.0 / reactances[l];
            for bus in 0..n_bus {
                let Some(k) = topo.state_index(bus) else { continue };
                let from = topo.state_index(br.from).map_or(0.0, |i| binv[(i, k)]);
                let to = topo.state_index(br.to).map_or(0.0, |i| binv[(i, k)]);
                ptdf[(l, bus)] = y * (from - to);
            }
        }
        let eliminated = topo
            .generators()
            .iter()
            .enumerate()
            .max_by(|a, b| {
                (a.1.pmax_mw - a.1.pmin_mw)
                    .partial_cmp(&(b.1.pmax_mw - b.1.pmin_mw))
                    .unwrap()
                    .then(b.0.cmp(&a.0))
            })
            .map(|(i, _)| i)
            .unwrap();
        Ok(Self { topo: topo.clone(), reactances: reactances.to_vec(), ptdf, eliminated })
    }

    pub fn reactances(&self) -> &[f64] {
        &self.reactances
    }

    pub fn solve(&self, loads_mw: &[f64]) -> Result<OpfSolution, OpfError> {
        let topo = &self.topo;
        if loads_mw.len() != topo.bus_count() {
            return Err(OpfError::LoadLength { expected: topo.bus_count(), got: loads_mw.len() });
        }
        let gens = topo.generators();
        let total: f64 = loads_mw.iter().sum();
        let cap: f64 = gens.iter().map(|g| g.pmax_mw).sum();
        if cap < total {
            return Err(OpfError::Infeasible(format!(
                "total load {total:.3} MW exceeds capacity {cap:.3} MW"
            )));
        }
        let e = self.eliminated;
        let free: Vec<usize> = (0..gens.len()).filter(|&g| g != e).collect();
        let n = free.len();
        let ge = &gens[e];
        let reg = |c2: f64| if c2 > 0.0 { c2 } else { 1e-8 };

        let mut q = DMatrix::from_element(n, n, 2.0 * reg(ge.cost_c2));
        let mut c = DVector::zeros(n);
        for (k, &g) in free.iter().enumerate() {
            q[(k, k)] += 2.0 * reg(gens[g].cost_c2);
            c[k] = gens[g].cost_c1 - 2.0 * ge.cost_c2 * total - ge.cost_c1;
        }

        let mut a = Vec::new();
        let mut b = Vec::new();
        for (k, &g) in free.iter().enumerate() {
            let mut row = DVector::zeros(n);
            row[k] = 1.0;
            a.push(row.clone());
            b.push(gens[g].pmin_mw);
            a.push(-row);
            b.push(-gens[g].pmax_mw);
        }
        // P_e = total - sum(y) within [pmin_e, pmax_e].
        a.push(DVector::from_element(n, -1.0));
        b.push(ge.pmin_mw - total);
        a.push(DVector::from_element(n, 1.0));
        b.push(total - ge.pmax_mw);

        // f = F y + f0.
        let l_count = topo.branch_count();
        let mut f0 = vec![0.0; l_count];
        let mut fmat = DMatrix::zeros(l_count, n);
        for l in 0..l_count {
            let mut v = -(0..topo.bus_count()).map(|bus| self.ptdf[(l, bus)] * loads_mw[bus]).sum::<f64>();
            v += self.ptdf[(l, ge.bus)] * total;
            f0[l] = v;
            for (k, &g) in free.iter().enumerate() {
                fmat[(l, k)] = self.ptdf[(l, gens[g].bus)] - self.ptdf[(l, ge.bus)];
            }
        }
        for (l, br) in topo.branches().iter().enumerate() {
            let row: DVector<f64> = fmat.row(l).transpose();
            a.push(row.clone());
            b.push(-br.flow_limit_mw - f0[l]);
            a.push(-row);
            b.push(-br.flow_limit_mw + f0[l]);
        }

        let y = InequalityQp { q, c, a, b }.solve()?;
        let mut dispatch = vec![0.0; gens.len()];
        for (k, &g) in free.iter().enumerate() {
            dispatch[g] = y[k];
        }
        dispatch[e] = total - y.iter().sum::<f64>();
        Ok(self.evaluate(&dispatch, loads_mw))
    }

    /// Flows, angles and cost for a given dispatch.
    pub fn evaluate(&self, dispatch_mw: &[f64], loads_mw: &[f64]) -> OpfSolution {
        let topo = &self.topo;
        let mut inj = loads_mw.iter().map(|l| -l).collect::<Vec<_>>();
        for (g, p) in topo.generators().iter().zip(dispatch_mw) {
            inj[g.bus] += p;
        }
        let flows: Vec<f64> = (0..topo.branch_count())
            .map(|l| (0..topo.bus_count()).map(|bus| self.ptdf[(l, bus)] * inj[bus]).sum())
            .collect();
        let angles = bus_angles(topo, &self.reactances, &inj);
        let cost = topo
            .generators()
            .iter()
            .zip(dispatch_mw)
            .map(|(g, p)| g.cost_c2 * p * p + g.cost_c1 * p)
            .sum();
        let feasible = flows
            .iter()
            .zip(topo.branches())
            .all(|(f, br)| f.abs() <= br.flow_limit_mw * (1.0 + 1e-7) + 1e-6);
        OpfSolution { dispatch_mw: dispatch_mw.to_vec(), bus_angles: angles, flows_mw: flows, cost, feasible }
    }
}

/// Solves `A D Aᵀ θ = P` for the non-slack angles given net injections in MW.
pub fn bus_angles(topo: &GridTopology, reactances: &[f64], injections_mw: &[f64]) -> Vec<f64> {
    let b = topo.reduced_susceptance(reactances);
    let p = DVector::from_iterator(
        topo.state_count(),
        (0..topo.bus_count())
            .filter(|&bus| bus != topo.slack())
            .map(|bus| injections_mw[bus] / BASE_MVA),
    );
    let theta = b.cholesky().expect("connected grid").solve(&p);
    topo.bus_angles(theta.as_slice())
}

/// Minimum-cost dispatch for the given loads and reactances.
pub fn dc_opf(topo: &GridTopology, loads_mw: &[f64], reactances: &[f64]) -> Result<OpfSolution, OpfError> {
    OpfModel::new(topo, reactances)?.solve(loads_mw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_case;
    use approx::assert_relative_eq;

    #[test]
    fn single_generator_takes_all_load() {
        let t = parse_case("[slack]\n1\n[bus]\n1 0\n2 80\n[branch]\n1 2 0.2 500\n[gen]\n1 0.05 12 0 300\n").unwrap();
        let s = dc_opf(&t, &[0.0, 80.0], &t.reactances()).unwrap();
        assert_relative_eq!(s.dispatch_mw[0], 80.0, epsilon = 1e-9);
        assert_relative_eq!(s.cost, 0.05 * 6400.0 + 12.0 * 80.0, epsilon = 1e-7);
        assert_relative_eq!(s.flows_mw[0], 80.0, epsilon = 1e-9);
        assert_relative_eq!(s.bus_angles[1], -0.8 * 0.2, epsilon = 1e-12);
    }

    #[test]
    fn identical_generators_split_evenly() {
        let t = parse_case(
            "[slack]\n1\n[bus]\n1 0\n2 0\n3 90\n[branch]\n1 3 0.1 500\n2 3 0.1 500\n1 2 0.1 500\n[gen]\n1 0.02 10 0 200\n2 0.02 10 0 200\n",
        )
        .unwrap();
        let s = dc_opf(&t, &[0.0, 0.0, 90.0], &t.reactances()).unwrap();
        assert_relative_eq!(s.dispatch_mw[0], 45.0, epsilon = 1e-8);
        assert_relative_eq!(s.dispatch_mw[1], 45.0, epsilon = 1e-8);
    }

    #[test]
    fn congestion_forces_expensive_unit() {
        // Cheap unit behind a 30 MW line: the expensive local unit covers the rest.
        let t = parse_case(
            "[slack]\n1\n[bus]\n1 0\n2 100\n[branch]\n1 2 0.1 30\n[gen]\n1 0.01 5 0 200\n2 0.01 50 0 200\n",
        )
        .unwrap();
        let s = dc_opf(&t, &[0.0, 100.0], &t.reactances()).unwrap();
        assert_relative_eq!(s.dispatch_mw[0], 30.0, epsilon = 1e-7);
        assert_relative_eq!(s.dispatch_mw[1], 70.0, epsilon = 1e-7);
        assert!(s.feasible);
    }

    #[test]
    fn infeasible_limits_are_reported() {
        let t = parse_case(
            "[slack]\n1\n[bus]\n1 0\n2 100\n[branch]\n1 2 0.1 30\n[gen]\n1 0.01 5 0 200\n",
        )
        .unwrap();
        assert!(matches!(dc_opf(&t, &[0.0, 100.0], &t.reactances()), Err(OpfError::Infeasible(_))));
        assert!(matches!(dc_opf(&t, &[0.0, 500.0], &t.reactances()), Err(OpfError::Infeasible(_))));
    }

    #[test]
    fn ieee14_base_cost_matches_reference() {
        // Reference value from an independent interior-point QP solve of the
        // same data (base loads, 160/60 MW limits).
        let t = crate::grid::GridTopology::ieee14();
        let s = dc_opf(&t, t.base_loads_mw(), &t.reactances()).unwrap();
        assert_relative_eq!(s.cost, 7735.258538826387, max_relative = 1e-6);
        assert!(s.feasible);
        let total: f64 = s.dispatch_mw.iter().sum();
        assert_relative_eq!(total, t.base_loads_mw().iter().sum::<f64>(), epsilon = 1e-8);
    }

    #[test]
    fn kkt_conditions_hold_on_random_qps() {
        use rand::Rng;
        let mut rng = crate::seed::rng(11);
        for _ in 0..50 {
            let n = rng.random_range(1..5);
            let m = rng.random_range(1..8);
            let mut q = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            q = &q * q.transpose() + DMatrix::identity(n, n) * 0.5;
            let c = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            // Constraints around a known interior point keep the problem feasible.
            let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let a: Vec<DVector<f64>> = (0..m).map(|_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))).collect();
            let b: Vec<f64> = a.iter().map(|ai| ai.dot(&x0) - rng.random_range(0.0..0.5)).collect();
            let qp = InequalityQp { q: q.clone(), c: c.clone(), a: a.clone(), b: b.clone() };
            let x = qp.solve().unwrap();
            // Brute-force oracle: projected check that no feasible random point is better.
            let obj = |x: &DVector<f64>| 0.5 * x.dot(&(&q * x)) + c.dot(x);
            for (ai, bi) in a.iter().zip(&b) {
                assert!(ai.dot(&x) >= bi - 1e-7);
            }
            let fx = obj(&x);
            for _ in 0..200 {
                let y = &x + DVector::from_fn(n, |_, _| rng.random_range(-0.3..0.3));
                if a.iter().zip(&b).all(|(ai, bi)| ai.dot(&y) >= *bi) {
                    assert!(obj(&y) >= fx - 1e-9);
                }
            }
        }
    }
}
