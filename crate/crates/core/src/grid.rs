//! Static network model: admittance assembly, power flow, fault application
//! and the internal/external partition.
//!
//! Conventions: per-unit everywhere, bus ids 1-based and contiguous. On slack
//! and generator buses `p_load`/`q_load` are the *net* scheduled demand, so a
//! generator exporting 5 pu carries `p_load = -5`. Only load buses are turned
//! into constant-impedance admittances for dynamic studies.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Generator,
    Load,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    #[serde(rename = "v_set")]
    pub voltage_setpoint: f64,
    #[serde(rename = "p_load")]
    pub load_p: f64,
    #[serde(rename = "q_load")]
    pub load_q: f64,
    #[serde(rename = "b_shunt")]
    pub shunt_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    #[serde(rename = "from")]
    pub from_bus: usize,
    #[serde(rename = "to")]
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
}

impl Branch {
    pub fn admittance(&self) -> C64 {
        C64::new(self.r, self.x).inv()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    #[serde(rename = "m")]
    pub inertia_m: f64,
    #[serde(rename = "d")]
    pub damping: f64,
    #[serde(rename = "xd_p")]
    pub xd_prime: f64,
}

/// A current source with first-order complex-linear dynamics,
/// `ds/dt = a (s - s0) + b (V - V0)`, used to build external systems whose
/// port behaviour is exactly linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSource {
    pub bus: usize,
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl LinearSource {
    pub fn a(&self) -> C64 {
        C64::new(self.a[0], self.a[1])
    }
    pub fn b(&self) -> C64 {
        C64::new(self.b[0], self.b[1])
    }
}

fn default_f_base() -> f64 {
    60.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    #[serde(default = "default_f_base")]
    pub f_base: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub linear_sources: Vec<LinearSource>,
}

fn default_fault_admittance() -> f64 {
    1e4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultScenario {
    pub fault_bus: usize,
    pub t_fault: f64,
    pub t_clear: f64,
    #[serde(default = "default_fault_admittance")]
    pub fault_admittance: f64,
}

impl FaultScenario {
    pub fn new(fault_bus: usize, t_fault: f64, t_clear: f64) -> Self {
        Self {
            fault_bus,
            t_fault,
            t_clear,
            fault_admittance: default_fault_admittance(),
        }
    }

    pub fn validate(&self, grid: &GridModel) -> Result<()> {
        if !(self.t_fault >= 0.0 && self.t_clear > self.t_fault) {
            return Err(Error::Validation(format!(
                "fault window [{}, {}) is empty",
                self.t_fault, self.t_clear
            )));
        }
        if !(self.fault_admittance > 0.0) {
            return Err(Error::Validation("fault admittance must be positive".into()));
        }
        if self.fault_bus == 0 || self.fault_bus > grid.buses.len() {
            return Err(Error::Validation(format!("unknown fault bus {}", self.fault_bus)));
        }
        Ok(())
    }
}

impl GridModel {
    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn omega_s(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.f_base
    }

    pub fn bus(&self, id: usize) -> &Bus {
        &self.buses[id - 1]
    }

    pub fn generator_at(&self, bus: usize) -> Option<usize> {
        self.generators.iter().position(|g| g.bus == bus)
    }

    pub fn source_at(&self, bus: usize) -> Option<usize> {
        self.linear_sources.iter().position(|s| s.bus == bus)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: GridModel = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.buses.is_empty() {
            return bad("grid has no buses".into());
        }
        if !(self.f_base > 0.0) {
            return bad("f_base must be positive".into());
        }
        for (k, b) in self.buses.iter().enumerate() {
            if b.id != k + 1 {
                return bad(format!("bus ids must be contiguous from 1 (found {} at position {})", b.id, k));
            }
            if !(b.load_p.is_finite() && b.load_q.is_finite() && b.shunt_b.is_finite()) {
                return bad(format!("bus {} has non-finite data", b.id));
            }
            if b.kind != BusKind::Load && !(b.voltage_setpoint > 0.0) {
                return bad(format!("bus {} needs a positive voltage setpoint", b.id));
            }
        }
        let slacks = self.buses.iter().filter(|b| b.kind == BusKind::Slack).count();
        if slacks != 1 {
            return bad(format!("exactly one slack bus required, found {slacks}"));
        }
        let n = self.n_bus();
        for br in &self.branches {
            if br.from_bus == br.to_bus {
                return bad(format!("branch {}-{} is a self loop", br.from_bus, br.to_bus));
            }
            if br.from_bus == 0 || br.from_bus > n || br.to_bus == 0 || br.to_bus > n {
                return bad(format!("branch {}-{} references unknown bus", br.from_bus, br.to_bus));
            }
            if !(br.x > 0.0) || !(br.r >= 0.0) {
                return bad(format!("branch {}-{} needs r >= 0 and x > 0", br.from_bus, br.to_bus));
            }
        }
        let mut seen = BTreeSet::new();
        for g in &self.generators {
            if g.bus == 0 || g.bus > n {
                return bad(format!("generator at unknown bus {}", g.bus));
            }
            if !seen.insert(g.bus) {
                return bad(format!("more than one generator at bus {}", g.bus));
            }
            if !(g.inertia_m > 0.0 && g.xd_prime > 0.0 && g.damping >= 0.0) {
                return bad(format!("generator at bus {} has invalid parameters", g.bus));
            }
        }
        for s in &self.linear_sources {
            if s.bus == 0 || s.bus > n {
                return bad(format!("linear source at unknown bus {}", s.bus));
            }
            if !seen.insert(s.bus) {
                return bad(format!("bus {} carries more than one dynamic device", s.bus));
            }
        }
        for b in &self.buses {
            if b.kind != BusKind::Load && !seen.contains(&b.id) {
                return bad(format!("{:?} bus {} has no machine or source", b.kind, b.id));
            }
        }
        if !self.connected(&(1..=n).collect()) {
            return bad("branch graph is not connected".into());
        }
        Ok(())
    }

    /// True when the buses in `set` induce a connected subgraph.
    pub fn connected(&self, set: &BTreeSet<usize>) -> bool {
        let Some(&start) = set.iter().next() else {
            return true;
        };
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(b) = queue.pop_front() {
            for br in &self.branches {
                let other = if br.from_bus == b {
                    br.to_bus
                } else if br.to_bus == b {
                    br.from_bus
                } else {
                    continue;
                };
                if set.contains(&other) && seen.insert(other) {
                    queue.push_back(other);
                }
            }
        }
        seen.len() == set.len()
    }
}

/// Nodal admittance matrix of the whole grid. With `active` set, the fault
/// admittance is added to the fault bus diagonal as a pure conductance.
pub fn build_ybus(grid: &GridModel, fault: Option<&FaultScenario>, active: bool) -> DMatrix<C64> {
    let n = grid.n_bus();
    let mut y = DMatrix::zeros(n, n);
    for br in &grid.branches {
        let (i, j) = (br.from_bus - 1, br.to_bus - 1);
        let ys = br.admittance();
        y[(i, i)] += ys;
        y[(j, j)] += ys;
        y[(i, j)] -= ys;
        y[(j, i)] -= ys;
    }
    for b in &grid.buses {
        y[(b.id - 1, b.id - 1)] += C64::new(0.0, b.shunt_b);
    }
    if let (Some(f), true) = (fault, active) {
        y[(f.fault_bus - 1, f.fault_bus - 1)] += C64::new(f.fault_admittance, 0.0);
    }
    y
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    /// Complex bus voltages, indexed by bus id - 1.
    pub voltages: Vec<C64>,
    /// Net complex injection per bus, `V conj(Y V)`.
    pub injections: Vec<C64>,
    /// Complex power delivered by each generator (grid order).
    pub generator_power: Vec<C64>,
    pub iterations: usize,
    pub mismatch: f64,
}

pub struct PowerFlowOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-12,
        }
    }
}

pub fn solve_power_flow(grid: &GridModel) -> Result<PowerFlowSolution> {
    solve_power_flow_with(grid, &PowerFlowOptions::default())
}

/// Full Newton-Raphson on the polar power mismatch.
pub fn solve_power_flow_with(grid: &GridModel, opts: &PowerFlowOptions) -> Result<PowerFlowSolution> {
    let n = grid.n_bus();
    let y = build_ybus(grid, None, false);
    let kind: Vec<BusKind> = grid.buses.iter().map(|b| b.kind).collect();
    let s_spec: Vec<C64> = grid.buses.iter().map(|b| -C64::new(b.load_p, b.load_q)).collect();

    // unknowns: angles of non-slack buses, magnitudes of load buses
    let pv_pq: Vec<usize> = (0..n).filter(|&i| kind[i] != BusKind::Slack).collect();
    let pq: Vec<usize> = (0..n).filter(|&i| kind[i] == BusKind::Load).collect();
    let mut vm: Vec<f64> = grid
        .buses
        .iter()
        .map(|b| if b.kind == BusKind::Load { 1.0 } else { b.voltage_setpoint })
        .collect();
    let mut va = vec![0.0; n];

    let voltages = |vm: &[f64], va: &[f64]| -> Vec<C64> {
        vm.iter().zip(va).map(|(&m, &a)| C64::from_polar(m, a)).collect()
    };
    let mismatch = |v: &[C64]| -> (Vec<C64>, Vec<f64>) {
        let vv = DVector::from_column_slice(v);
        let i = &y * &vv;
        let s: Vec<C64> = (0..n).map(|k| v[k] * i[k].conj()).collect();
        let mut f = Vec::with_capacity(pv_pq.len() + pq.len());
        for &k in &pv_pq {
            f.push(s[k].re - s_spec[k].re);
        }
        for &k in &pq {
            f.push(s[k].im - s_spec[k].im);
        }
        (s, f)
    };

    let inf = |f: &[f64]| f.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let mut v = voltages(&vm, &va);
    let (mut s, mut f) = mismatch(&v);
    let mut iters = 0;
    while inf(&f) > opts.tol {
        if iters >= opts.max_iters || !inf(&f).is_finite() {
            return Err(Error::PowerFlow {
                iterations: iters,
                mismatch: inf(&f),
            });
        }
        iters += 1;
        // dS/dVa = j diag(V) conj(diag(I) - Y diag(V)), dS/dVm = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
        let vv = DVector::from_column_slice(&v);
        let ibus = &y * &vv;
        let nu = pv_pq.len() + pq.len();
        let mut jac = DMatrix::<f64>::zeros(nu, nu);
        let ds_dva = |r: usize, c: usize| -> C64 {
            let mut t = -y[(r, c)] * v[c];
            if r == c {
                t += ibus[r];
            }
            C64::i() * v[r] * t.conj()
        };
        let ds_dvm = |r: usize, c: usize| -> C64 {
            let vn = v[c] / v[c].norm();
            let mut t = v[r] * (y[(r, c)] * vn).conj();
            if r == c {
                t += ibus[r].conj() * vn;
            }
            t
        };
        let np = pv_pq.len();
        for (a, &r) in pv_pq.iter().enumerate() {
            for (b, &c) in pv_pq.iter().enumerate() {
                jac[(a, b)] = ds_dva(r, c).re;
            }
            for (b, &c) in pq.iter().enumerate() {
                jac[(a, np + b)] = ds_dvm(r, c).re;
            }
        }
        for (a, &r) in pq.iter().enumerate() {
            for (b, &c) in pv_pq.iter().enumerate() {
                jac[(np + a, b)] = ds_dva(r, c).im;
            }
            for (b, &c) in pq.iter().enumerate() {
                jac[(np + a, np + b)] = ds_dvm(r, c).im;
            }
        }
        let dx = jac
            .lu()
            .solve(&DVector::from_vec(f.iter().map(|x| -x).collect()))
            .ok_or_else(|| Error::PowerFlow {
                iterations: iters,
                mismatch: inf(&f),
            })?;
        for (a, &k) in pv_pq.iter().enumerate() {
            va[k] += dx[a];
        }
        for (b, &k) in pq.iter().enumerate() {
            vm[k] += dx[np + b];
        }
        v = voltages(&vm, &va);
        (s, f) = mismatch(&v);
    }
    let generator_power = grid
        .generators
        .iter()
        .map(|g| {
            // demand at generator and slack buses is netted into the machine
            let b = grid.bus(g.bus);
            match b.kind {
                BusKind::Load => s[g.bus - 1] + C64::new(b.load_p, b.load_q),
                _ => s[g.bus - 1],
            }
        })
        .collect();
    Ok(PowerFlowSolution {
        voltages: v,
        injections: s,
        generator_power,
        iterations: iters,
        mismatch: inf(&f),
    })
}

/// A branch crossing the internal/external cut.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TieLine {
    pub branch: usize,
    pub internal_bus: usize,
    pub external_bus: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub internal_buses: Vec<usize>,
    pub external_buses: Vec<usize>,
    pub tie_lines: Vec<TieLine>,
    pub ports: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct PartitionFile {
    internal: Vec<usize>,
}

impl Partition {
    pub fn n_ports(&self) -> usize {
        self.ports.len()
    }

    pub fn is_internal(&self, bus: usize) -> bool {
        self.internal_buses.binary_search(&bus).is_ok()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PartitionFile {
            internal: self.internal_buses.clone(),
        })
        .expect("partition serializes")
    }

    pub fn from_json(grid: &GridModel, s: &str) -> Result<Self> {
        let f: PartitionFile = serde_json::from_str(s)?;
        make_partition(grid, &f.internal.into_iter().collect())
    }

    /// Stable textual digest of the cut, stored in model artifacts.
    pub fn fingerprint(&self) -> String {
        let ties: Vec<String> = self
            .tie_lines
            .iter()
            .map(|t| format!("{}:{}-{}", t.branch, t.internal_bus, t.external_bus))
            .collect();
        let mut h: u64 = 0xcbf29ce484222325;
        let text = format!("{:?}|{}", self.internal_buses, ties.join(","));
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

pub fn make_partition(grid: &GridModel, internal: &BTreeSet<usize>) -> Result<Partition> {
    let n = grid.n_bus();
    if internal.is_empty() {
        return Err(Error::Validation("empty internal system".into()));
    }
    if let Some(&b) = internal.iter().find(|&&b| b == 0 || b > n) {
        return Err(Error::Validation(format!("unknown internal bus {b}")));
    }
    let external: Vec<usize> = (1..=n).filter(|b| !internal.contains(b)).collect();
    if external.is_empty() {
        return Err(Error::Validation("empty external system".into()));
    }
    let tie_lines: Vec<TieLine> = grid
        .branches
        .iter()
        .enumerate()
        .filter_map(|(k, br)| {
            match (internal.contains(&br.from_bus), internal.contains(&br.to_bus)) {
                (true, false) => Some(TieLine {
                    branch: k,
                    internal_bus: br.from_bus,
                    external_bus: br.to_bus,
                }),
                (false, true) => Some(TieLine {
                    branch: k,
                    internal_bus: br.to_bus,
                    external_bus: br.from_bus,
                }),
                _ => None,
            }
        })
        .collect();
    if tie_lines.is_empty() {
        return Err(Error::Validation("empty cut: no tie lines".into()));
    }
    let ports = tie_lines.iter().map(|t| t.internal_bus).collect();
    Ok(Partition {
        internal_buses: internal.iter().copied().collect(),
        external_buses: external,
        tie_lines,
        ports,
    })
}
