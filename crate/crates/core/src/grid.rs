//! Network model: case parsing, incidence matrix and the DC measurement Jacobian.
//!
//! Buses are numbered from 1 in case files and from 0 everywhere in memory.
//! The state vector holds the voltage angles of every bus except the slack,
//! in ascending bus order. Measurements are ordered `[Pf; -Pf; P]`: branch
//! flows in case-file order, their negations, then the injection at every bus
//! (slack included), so `M = 2L + N`.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

/// System base used to convert MW quantities to per-unit.
pub const BASE_MVA: f64 = 100.0;

const CASE14: &str = include_str!("../data/case14.case");
const CASE30: &str = include_str!("../data/case30.case");
const CASE118: &str = include_str!("../data/case118.case");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("invalid case: {0}")]
    Semantic(String),
    #[error("branch {branch}: reactance must be positive, got {value}")]
    NonPositiveReactance { branch: usize, value: f64 },
    #[error("expected {expected} reactances, got {got}")]
    ReactanceLength { expected: usize, got: usize },
    #[error("unknown bundled case `{0}` (expected ieee14, ieee30 or ieee118)")]
    UnknownCase(String),
    #[error("cannot read case file {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    /// Series reactance in per-unit.
    pub reactance: f64,
    pub flow_limit_mw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub bus: usize,
    /// Quadratic cost coefficient, currency/MW²h.
    pub cost_c2: f64,
    /// Linear cost coefficient, currency/MWh.
    pub cost_c1: f64,
    pub pmin_mw: f64,
    pub pmax_mw: f64,
}

/// A validated DC network. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTopology {
    bus_count: usize,
    slack: usize,
    base_loads_mw: Vec<f64>,
    branches: Vec<Branch>,
    generators: Vec<Generator>,
    dfacts: Vec<usize>,
}

impl GridTopology {
    pub fn new(
        bus_count: usize,
        slack: usize,
        base_loads_mw: Vec<f64>,
        branches: Vec<Branch>,
        generators: Vec<Generator>,
        dfacts: Vec<usize>,
    ) -> Result<Self, GridError> {
        if bus_count < 2 {
            return Err(GridError::Semantic("at least two buses are required".into()));
        }
        if slack >= bus_count {
            return Err(GridError::Semantic(format!("slack bus {} does not exist", slack + 1)));
        }
        if base_loads_mw.len() != bus_count {
            return Err(GridError::Semantic("one base load per bus is required".into()));
        }
        if branches.is_empty() {
            return Err(GridError::Semantic("no branches".into()));
        }
        for (l, br) in branches.iter().enumerate() {
            if br.from >= bus_count || br.to >= bus_count {
                return Err(GridError::Semantic(format!(
                    "branch {} references a missing bus",
                    l + 1
                )));
            }
            if br.from == br.to {
                return Err(GridError::Semantic(format!("branch {} is a self loop", l + 1)));
            }
            if !(br.reactance > 0.0) || !br.reactance.is_finite() {
                return Err(GridError::NonPositiveReactance { branch: l + 1, value: br.reactance });
            }
            if !(br.flow_limit_mw > 0.0) {
                return Err(GridError::Semantic(format!(
                    "branch {} has a nonpositive flow limit",
                    l + 1
                )));
            }
        }
        for g in &generators {
            if g.bus >= bus_count {
                return Err(GridError::Semantic(format!("generator at missing bus {}", g.bus + 1)));
            }
            if g.pmin_mw > g.pmax_mw || g.cost_c2 < 0.0 {
                return Err(GridError::Semantic(format!(
                    "generator at bus {} has invalid bounds or cost",
                    g.bus + 1
                )));
            }
        }
        if let Some(&l) = dfacts.iter().find(|&&l| l >= branches.len()) {
            return Err(GridError::Semantic(format!("D-FACTS branch {} does not exist", l + 1)));
        }
        let topo = Self { bus_count, slack, base_loads_mw, branches, generators, dfacts };
        if !topo.is_connected() {
            return Err(GridError::Semantic("branch graph is not connected".into()));
        }
        Ok(topo)
    }

    /// One of the bundled IEEE cases: `ieee14`, `ieee30` or `ieee118`.
    pub fn bundled(name: &str) -> Result<Self, GridError> {
        let text = match name.to_ascii_lowercase().as_str() {
            "ieee14" | "case14" | "14" => CASE14,
            "ieee30" | "case30" | "30" => CASE30,
            "ieee118" | "case118" | "118" => CASE118,
            _ => return Err(GridError::UnknownCase(name.to_string())),
        };
        parse_case(text)
    }

    pub fn ieee14() -> Self {
        Self::bundled("ieee14").expect("bundled case is valid")
    }

    /// Loads a case from a bundled name or a file path.
    pub fn load(spec: &str) -> Result<Self, GridError> {
        match Self::bundled(spec) {
            Ok(t) => Ok(t),
            Err(GridError::UnknownCase(_)) => {
                let path = Path::new(spec);
                let text = std::fs::read_to_string(path).map_err(|e| GridError::Io {
                    path: path.display().to_string(),
                    msg: e.to_string(),
                })?;
                parse_case(&text)
            }
            Err(e) => Err(e),
        }
    }

    pub fn bus_count(&self) -> usize {
        self.bus_count
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn state_count(&self) -> usize {
        self.bus_count - 1
    }

    pub fn measurement_count(&self) -> usize {
        2 * self.branches.len() + self.bus_count
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn generators(&self) -> &[Generator] {
        &self.generators
    }

    pub fn base_loads_mw(&self) -> &[f64] {
        &self.base_loads_mw
    }

    pub fn dfacts(&self) -> &[usize] {
        &self.dfacts
    }

    /// Same grid with a different D-FACTS set (0-based branch indices).
    pub fn with_dfacts(&self, lines: &[usize]) -> Result<Self, GridError> {
        if let Some(&l) = lines.iter().find(|&&l| l >= self.branches.len()) {
            return Err(GridError::Semantic(format!("D-FACTS branch {} does not exist", l.wrapping_add(1))));
        }
        let mut dfacts = lines.to_vec();
        dfacts.sort_unstable();
        dfacts.dedup();
        Ok(Self { dfacts, ..self.clone() })
    }

    pub fn reactances(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.reactance).collect()
    }

    pub fn flow_limits_mw(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.flow_limit_mw).collect()
    }

    /// Row of `bus` in the reduced (slack-free) state vector.
    pub fn state_index(&self, bus: usize) -> Option<usize> {
        match bus.cmp(&self.slack) {
            std::cmp::Ordering::Less => Some(bus),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(bus - 1),
        }
    }

    /// Expands a reduced state vector to per-bus angles with the slack at zero.
    pub fn bus_angles(&self, state: &[f64]) -> Vec<f64> {
        (0..self.bus_count)
            .map(|b| self.state_index(b).map_or(0.0, |i| state[i]))
            .collect()
    }

    fn is_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.bus_count];
        for br in &self.branches {
            adj[br.from].push(br.to);
            adj[br.to].push(br.from);
        }
        let mut seen = vec![false; self.bus_count];
        let mut queue = VecDeque::from([self.slack]);
        seen[self.slack] = true;
        while let Some(b) = queue.pop_front() {
            for &n in &adj[b] {
                if !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Reduced branch-bus incidence matrix, `(N-1) x L`: +1 at the from bus,
    /// -1 at the to bus, slack row removed.
    pub fn incidence_matrix(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.state_count(), self.branch_count());
        for (l, br) in self.branches.iter().enumerate() {
            if let Some(i) = self.state_index(br.from) {
                a[(i, l)] = 1.0;
            }
            if let Some(i) = self.state_index(br.to) {
                a[(i, l)] = -1.0;
            }
        }
        a
    }

    /// Full incidence matrix including the slack row, `N x L`.
    pub fn full_incidence_matrix(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.bus_count, self.branch_count());
        for (l, br) in self.branches.iter().enumerate() {
            a[(br.from, l)] = 1.0;
            a[(br.to, l)] = -1.0;
        }
        a
    }

    /// Builds the measurement Jacobian for the given per-branch reactances.
    pub fn jacobian(&self, reactances: &[f64]) -> Result<JacobianMatrix, GridError> {
        self.check_reactances(reactances)?;
        let (l_count, n) = (self.branch_count(), self.state_count());
        let m = self.measurement_count();
        let mut h = DMatrix::zeros(m, n);
        for (l, br) in self.branches.iter().enumerate() {
            let y = 1.0 / reactances[l];
            let from = self.state_index(br.from);
            let to = self.state_index(br.to);
            if let Some(i) = from {
                h[(l, i)] += y;
                h[(l_count + l, i)] -= y;
            }
            if let Some(j) = to {
                h[(l, j)] -= y;
                h[(l_count + l, j)] += y;
            }
        }
        // Injection block: A_full * (D A^T), accumulated branch by branch.
        let inj = 2 * l_count;
        for (l, br) in self.branches.iter().enumerate() {
            for col in 0..n {
                let f = h[(l, col)];
                if f != 0.0 {
                    h[(inj + br.from, col)] += f;
                    h[(inj + br.to, col)] -= f;
                }
            }
        }
        Ok(JacobianMatrix { h, reactances: reactances.to_vec() })
    }

    pub fn check_reactances(&self, reactances: &[f64]) -> Result<(), GridError> {
        if reactances.len() != self.branch_count() {
            return Err(GridError::ReactanceLength {
                expected: self.branch_count(),
                got: reactances.len(),
            });
        }
        if let Some((l, &x)) = reactances.iter().enumerate().find(|(_, &x)| !(x > 0.0) || !x.is_finite()) {
            return Err(GridError::NonPositiveReactance { branch: l + 1, value: x });
        }
        Ok(())
    }

    /// Reduced nodal susceptance matrix `A D A^T` for the given reactances.
    pub fn reduced_susceptance(&self, reactances: &[f64]) -> DMatrix<f64> {
        let n = self.state_count();
        let mut b = DMatrix::zeros(n, n);
        for (l, br) in self.branches.iter().enumerate() {
            let y = 1.0 / reactances[l];
            let i = self.state_index(br.from);
            let j = self.state_index(br.to);
            if let Some(i) = i {
                b[(i, i)] += y;
            }
            if let Some(j) = j {
                b[(j, j)] += y;
            }
            if let (Some(i), Some(j)) = (i, j) {
                b[(i, j)] -= y;
                b[(j, i)] -= y;
            }
        }
        b
    }
}

/// Dense DC measurement Jacobian together with the reactances it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    h: DMatrix<f64>,
    reactances: Vec<f64>,
}

impl JacobianMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn reactances(&self) -> &[f64] {
        &self.reactances
    }

    pub fn measurement_count(&self) -> usize {
        self.h.nrows()
    }

    pub fn state_count(&self) -> usize {
        self.h.ncols()
    }

    /// `H * state` as a plain vector.
    pub fn apply(&self, state: &[f64]) -> Vec<f64> {
        let m = self.h.nrows();
        let mut out = vec![0.0; m];
        for (j, &s) in state.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let col = self.h.column(j);
            for (o, &h) in out.iter_mut().zip(col.iter()) {
                *o += h * s;
            }
        }
        out
    }

    /// `H^T * v`.
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        (0..self.h.ncols())
            .map(|j| self.h.column(j).iter().zip(v).map(|(h, x)| h * x).sum())
            .collect()
    }
}

/// Parses the line-oriented case format.
///
/// Sections: `[slack]` (one bus index), `[bus]` (index, base load MW),
/// `[branch]` (from, to, reactance pu, flow limit MW), `[gen]` (bus, c2, c1,
/// pmin MW, pmax MW) and `[dfacts]` (1-based branch indices, any number per
/// line). `#` starts a comment.
pub fn parse_case(text: &str) -> Result<GridTopology, GridError> {
    #[derive(PartialEq, Clone, Copy)]
    enum Section {
        None,
        Slack,
        Bus,
        Branch,
        Gen,
        Dfacts,
    }
    let mut section = Section::None;
    let mut slack: Option<usize> = None;
    let mut buses: Vec<(usize, f64)> = Vec::new();
    let mut branches_raw = Vec::new();
    let mut gens_raw = Vec::new();
    let mut dfacts = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            section = match line {
                "[slack]" => Section::Slack,
                "[bus]" => Section::Bus,
                "[branch]" => Section::Branch,
                "[gen]" => Section::Gen,
                "[dfacts]" => Section::Dfacts,
                other => {
                    return Err(GridError::Syntax {
                        line: line_no,
                        msg: format!("unknown section {other}"),
                    })
                }
            };
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| -> Result<f64, GridError> {
            fields[i].parse::<f64>().map_err(|_| GridError::Syntax {
                line: line_no,
                msg: format!("`{}` is not a number", fields[i]),
            })
        };
        let index = |i: usize| -> Result<usize, GridError> {
            match fields[i].parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v - 1),
                _ => Err(GridError::Syntax {
                    line: line_no,
                    msg: format!("`{}` is not a 1-based index", fields[i]),
                }),
            }
        };
        let expect = |n: usize| -> Result<(), GridError> {
            if fields.len() != n {
                Err(GridError::Syntax {
                    line: line_no,
                    msg: format!("expected {n} fields, found {}", fields.len()),
                })
            } else {
                Ok(())
            }
        };
        match section {
            Section::None => {
                return Err(GridError::Syntax { line: line_no, msg: "record outside a section".into() })
            }
            Section::Slack => {
                expect(1)?;
                if slack.replace(index(0)?).is_some() {
                    return Err(GridError::Syntax { line: line_no, msg: "slack declared twice".into() });
                }
            }
            Section::Bus => {
                expect(2)?;
                buses.push((index(0)?, num(1)?));
            }
            Section::Branch => {
                expect(4)?;
                branches_raw.push(Branch {
                    from: index(0)?,
                    to: index(1)?,
                    reactance: num(2)?,
                    flow_limit_mw: num(3)?,
                });
            }
            Section::Gen => {
                expect(5)?;
                gens_raw.push(Generator {
                    bus: index(0)?,
                    cost_c2: num(1)?,
                    cost_c1: num(2)?,
                    pmin_mw: num(3)?,
                    pmax_mw: num(4)?,
                });
            }
            Section::Dfacts => {
                for i in 0..fields.len() {
                    dfacts.push(index(i)?);
                }
            }
        }
    }

    let slack = slack.ok_or_else(|| GridError::Semantic("missing [slack] bus".into()))?;
    let bus_count = buses.len();
    let mut loads = vec![f64::NAN; bus_count];
    for &(b, load) in &buses {
        if b >= bus_count || !loads[b].is_nan() {
            return Err(GridError::Semantic(format!(
                "bus indices must be exactly 1..={bus_count} without repeats (found {})",
                b + 1
            )));
        }
        loads[b] = load;
    }
    dfacts.sort_unstable();
    dfacts.dedup();
    GridTopology::new(bus_count, slack, loads, branches_raw, gens_raw, dfacts)
}

/// Serializes a topology back to the case format.
pub fn write_case(topo: &GridTopology) -> String {
    let mut out = String::new();
    out.push_str("[slack]\n");
    out.push_str(&format!("{}\n\n[bus]\n", topo.slack + 1));
    for (b, load) in topo.base_loads_mw.iter().enumerate() {
        out.push_str(&format!("{} {}\n", b + 1, load));
    }
    out.push_str("\n[branch]\n");
    for br in &topo.branches {
        out.push_str(&format!("{} {} {} {}\n", br.from + 1, br.to + 1, br.reactance, br.flow_limit_mw));
    }
    out.push_str("\n[gen]\n");
    for g in &topo.generators {
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            g.bus + 1,
            g.cost_c2,
            g.cost_c1,
            g.pmin_mw,
            g.pmax_mw
        ));
    }
    out.push_str("\n[dfacts]\n");
    let list: Vec<String> = topo.dfacts.iter().map(|l| (l + 1).to_string()).collect();
    out.push_str(&list.join(" "));
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus() -> GridTopology {
        parse_case(
            "[slack]\n1\n[bus]\n1 0\n2 100\n[branch]\n1 2 0.5 200\n[gen]\n1 0.01 10 0 300\n",
        )
        .unwrap()
    }

    fn triangle() -> GridTopology {
        parse_case(
            "[slack]\n1\n[bus]\n1 0\n2 50\n3 50\n[branch]\n1 2 0.1 100\n2 3 0.2 100\n1 3 0.25 100\n[gen]\n1 0.01 10 0 300\n",
        )
        .unwrap()
    }

    #[test]
    fn bundled_case_dimensions() {
        let t14 = GridTopology::bundled("ieee14").unwrap();
        assert_eq!((t14.bus_count(), t14.branch_count()), (14, 20));
        assert_eq!(t14.measurement_count(), 54);
        assert_eq!(t14.dfacts(), &[0, 4, 8, 10, 13, 16, 18]);
        let t30 = GridTopology::bundled("ieee30").unwrap();
        assert_eq!(t30.measurement_count(), 112);
        let t118 = GridTopology::bundled("ieee118").unwrap();
        assert_eq!(t118.measurement_count(), 490);
    }

    #[test]
    fn ieee14_flow_limits() {
        let t = GridTopology::ieee14();
        let lim = t.flow_limits_mw();
        assert_eq!(lim[0], 160.0);
        assert!(lim[1..].iter().all(|&l| l == 60.0));
    }

    #[test]
    fn zero_reactance_is_rejected() {
        let err = parse_case("[slack]\n1\n[bus]\n1 0\n2 1\n[branch]\n1 2 0 100\n").unwrap_err();
        assert!(matches!(err, GridError::NonPositiveReactance { branch: 1, .. }));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse_case("[slack]\n1\n[bus]\n1 zero\n").unwrap_err();
        assert_eq!(err, GridError::Syntax { line: 4, msg: "`zero` is not a number".into() });
        let err = parse_case("[bus]\n1 0\n[shunt]\n").unwrap_err();
        assert!(matches!(err, GridError::Syntax { line: 3, .. }));
    }

    #[test]
    fn disconnected_and_missing_slack() {
        let err = parse_case(
            "[slack]\n1\n[bus]\n1 0\n2 0\n3 0\n4 0\n[branch]\n1 2 0.1 10\n3 4 0.1 10\n",
        )
        .unwrap_err();
        assert!(matches!(err, GridError::Semantic(ref m) if m.contains("connected")));
        let err = parse_case("[bus]\n1 0\n2 0\n[branch]\n1 2 0.1 10\n").unwrap_err();
        assert!(matches!(err, GridError::Semantic(ref m) if m.contains("slack")));
    }

    #[test]
    fn incidence_two_bus_and_triangle() {
        assert_eq!(two_bus().incidence_matrix(), DMatrix::from_row_slice(1, 1, &[-1.0]));
        let expected = DMatrix::from_row_slice(2, 3, &[-1.0, 1.0, 0.0, 0.0, -1.0, -1.0]);
        assert_eq!(triangle().incidence_matrix(), expected);
    }

    #[test]
    fn ieee14_incidence_structure() {
        let t = GridTopology::ieee14();
        let a = t.incidence_matrix();
        let full = t.full_incidence_matrix();
        for l in 0..t.branch_count() {
            let col_sum: f64 = a.column(l).sum();
            assert_eq!(col_sum, -full[(t.slack(), l)]);
            let br = &t.branches()[l];
            let nnz = a.column(l).iter().filter(|v| **v != 0.0).count();
            let touches_slack = br.from == t.slack() || br.to == t.slack();
            assert_eq!(nnz, if touches_slack { 1 } else { 2 });
        }
    }

    #[test]
    fn jacobian_two_bus() {
        let t = two_bus();
        let h = t.jacobian(&[0.5]).unwrap();
        // Pf, -Pf, P_slack, P_2 with Pf = (theta_1 - theta_2) / x.
        assert_eq!(h.matrix(), &DMatrix::from_row_slice(4, 1, &[-2.0, 2.0, -2.0, 2.0]));
    }

    #[test]
    fn jacobian_blocks_and_rank() {
        let t = GridTopology::ieee14();
        let jac = t.jacobian(&t.reactances()).unwrap();
        let h = jac.matrix();
        let l = t.branch_count();
        for r in 0..l {
            for c in 0..h.ncols() {
                assert_eq!(h[(r, c)], -h[(l + r, c)]);
            }
        }
        // Non-slack injection rows equal A D A^T.
        let a = t.incidence_matrix();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            l,
            t.reactances().iter().map(|x| 1.0 / x),
        ));
        let adat = &a * d * a.transpose();
        for b in 0..t.bus_count() {
            if let Some(i) = t.state_index(b) {
                for c in 0..h.ncols() {
                    assert!((h[(2 * l + b, c)] - adat[(i, c)]).abs() < 1e-12);
                }
            }
        }
        assert!(adat.clone().cholesky().is_some());
        let sv = h.clone().svd(false, false).singular_values;
        let rank = sv.iter().filter(|s| **s > 1e-9 * sv[0]).count();
        assert_eq!(rank, 13);
        assert_eq!(t.jacobian(&t.reactances()).unwrap(), jac);
    }

    #[test]
    fn jacobian_rejects_bad_reactances() {
        let t = two_bus();
        assert!(matches!(t.jacobian(&[-1.0]), Err(GridError::NonPositiveReactance { .. })));
        assert!(matches!(t.jacobian(&[1.0, 1.0]), Err(GridError::ReactanceLength { .. })));
    }

    #[test]
    fn case_round_trip() {
        let t = GridTopology::ieee14();
        assert_eq!(parse_case(&write_case(&t)).unwrap(), t);
    }
}
