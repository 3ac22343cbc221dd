//! Time-domain simulation of the full physics system and of the two hybrid
//! closed loops (physics internal system plus a learned external equivalent).
//!
//! Machine states use the implicit trapezoidal rule, solved by fixed-point
//! iteration alternating with the network solve. Explicit states (neural
//! tie currents, Norton current sources, linear external sources) use the
//! explicit trapezoidal rule (Heun): a predictor `e_p = e + h g` feeds the
//! implicit machine update, and the corrector averages the slopes at both
//! ends. The same step drives every simulation and every training forward
//! pass.

mod trajectory;

use std::cell::RefCell;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use trajectory::Trajectory;

use crate::dp::DpModel;
use crate::dynamics::{rhs_into, Eliminated, LinearFeatureMap, NetworkSolver, Region};
use crate::grid::{solve_power_flow, FaultScenario, GridModel, Partition, PowerFlowSolution};
use crate::neuralnet::{FeatureSelector, NeuralEquivalence, TieSource, Workspace};
use crate::{Error, Result, C64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    pub divergence_threshold: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.005,
            t_end: 5.0,
            newton_tol: 1e-10,
            max_newton_iters: 50,
            divergence_threshold: 1e3,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.t_end > self.dt) {
            return Err(Error::Validation("need dt > 0 and t_end > dt".into()));
        }
        if !(self.newton_tol > 0.0 && self.divergence_threshold > 0.0 && self.max_newton_iters > 0) {
            return Err(Error::Validation("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// One integration node: a time and the index of the network topology in
/// force (0 pre-fault, 1 fault-on, 2 post-fault).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Node {
    pub t: f64,
    pub segment: usize,
}

fn switch_times(scenario: Option<&FaultScenario>) -> Vec<f64> {
    scenario.map_or(Vec::new(), |s| vec![s.t_fault, s.t_clear])
}

/// Nodes `t0 + k dt` up to `t_end`, with each switching instant present
/// twice (pre- and post-switch). Switches off the sample grid get their own
/// node pair.
pub fn schedule(t0: f64, dt: f64, t_end: f64, scenario: Option<&FaultScenario>) -> Vec<Node> {
    let tol = 1e-9 * dt;
    let n = ((t_end - t0) / dt).round().max(1.0) as usize;
    let mut times: Vec<f64> = (0..=n).map(|k| t0 + k as f64 * dt).collect();
    let t_last = times[n];
    let switches = switch_times(scenario);
    for &s in &switches {
        if s > t0 + tol && s < t_last - tol && !times.iter().any(|t| (t - s).abs() <= tol) {
            times.push(s);
        }
    }
    times.sort_by(f64::total_cmp);
    let mut nodes = Vec::with_capacity(times.len() + 2);
    for t in times {
        let before = switches.iter().filter(|&&s| s < t - tol).count();
        let at = switches.iter().filter(|&&s| (s - t).abs() <= tol).count();
        nodes.push(Node { t, segment: before });
        if at > 0 {
            nodes.push(Node { t, segment: before + at });
        }
    }
    nodes
}

/// Segments for recorded sample times; a repeated time marks the
/// pre-/post-switch pair.
pub fn segments_for_times(times: &[f64], scenario: Option<&FaultScenario>) -> Vec<Node> {
    let switches = switch_times(scenario);
    let dt = times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max).max(1e-12);
    let tol = 1e-9 * dt;
    (0..times.len())
        .map(|i| {
            let t = times[i];
            let pre = i + 1 < times.len() && times[i + 1] == t;
            let segment = switches
                .iter()
                .filter(|&&s| if pre { s < t - tol } else { s <= t + tol })
                .count();
            Node { t, segment }
        })
        .collect()
}

/// Dynamics of the explicit (non-physics) states.
pub trait ExplicitDynamics {
    fn dim(&self) -> usize;

    fn hidden_dim(&self) -> usize {
        0
    }

    /// Write `de/dt` into `out` and the next hidden state into `hidden_out`.
    #[allow(clippy::too_many_arguments)]
    fn derivative(&self, t: f64, x: &[f64], e: &[f64], v: &[C64], hidden: &[f64], out: &mut [f64], hidden_out: &mut Vec<f64>);

    /// Called on the post-switch copy of a switching instant.
    fn reset_at_switch(&self, _t: f64, _e: &mut [f64]) {}
}

/// One implicit trapezoidal step `x1 = x0 + h/2 (f0 + f(x1))` by fixed-point
/// iteration from an explicit Euler guess. Returns the new state and the
/// iteration count, or the last change on failure.
pub fn trapezoid_step<F>(h: f64, x0: &[f64], f0: &[f64], mut rhs: F, tol: f64, max_iters: usize) -> std::result::Result<(Vec<f64>, usize), f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut xk: Vec<f64> = x0.iter().zip(f0).map(|(x, f)| x + h * f).collect();
    let mut change = f64::INFINITY;
    for it in 1..=max_iters {
        let f1 = rhs(&xk);
        change = 0.0;
        for i in 0..xk.len() {
            let xn = x0[i] + 0.5 * h * (f0[i] + f1[i]);
            change = f64::max(change, (xn - xk[i]).abs());
            xk[i] = xn;
        }
        if !change.is_finite() {
            return Err(change);
        }
        if change < tol {
            return Ok((xk, it));
        }
    }
    Err(change)
}

/// Everything evaluated at one node.
#[derive(Clone, Debug, Default)]
pub struct NodeState {
    pub x: Vec<f64>,
    pub e: Vec<f64>,
    pub v: Vec<C64>,
    /// Machine right-hand side.
    pub f: Vec<f64>,
    /// Explicit-state right-hand side.
    pub g: Vec<f64>,
    /// Hidden state produced at this node (input to the next).
    pub hidden_out: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub nodes: Vec<Node>,
    pub states: Vec<NodeState>,
    pub diverged: bool,
}

/// A region with one network factorization per topology segment and the
/// buses receiving the explicit injections.
pub struct Engine<'a> {
    pub region: &'a Region,
    pub solvers: &'a [NetworkSolver],
    pub sites: &'a [usize],
    pub dynamics: Option<&'a dyn ExplicitDynamics>,
}

impl<'a> Engine<'a> {
    pub fn eliminated(&self, segment: usize) -> Eliminated<'_> {
        Eliminated {
            region: self.region,
            solver: &self.solvers[segment.min(self.solvers.len() - 1)],
            sites: self.sites,
        }
    }

    pub fn eval(&self, node: Node, x: Vec<f64>, e: Vec<f64>, hidden_in: &[f64]) -> NodeState {
        let v = self.eliminated(node.segment).voltages(&x, &e);
        let mut f = vec![0.0; x.len()];
        rhs_into(self.region, &x, &v, &mut f);
        let mut g = vec![0.0; e.len()];
        let mut hidden_out = Vec::new();
        if let Some(d) = self.dynamics {
            d.derivative(node.t, &x, &e, &v, hidden_in, &mut g, &mut hidden_out);
        }
        NodeState { x, e, v, f, g, hidden_out }
    }

    /// Integrate over `nodes` from `(x0, e0)`. Stops early, flagged, when the
    /// state leaves the divergence bound.
    pub fn run(&self, nodes: &[Node], x0: &[f64], e0: &[f64], cfg: &SimConfig) -> Result<RunRecord> {
        let ne = self.dynamics.map_or(0, |d| d.dim());
        if e0.len() != ne || e0.len() != 2 * self.sites.len() {
            return Err(Error::Dimension {
                what: "explicit state",
                expected: 2 * self.sites.len(),
                got: e0.len(),
            });
        }
        let hidden0 = vec![0.0; self.dynamics.map_or(0, |d| d.hidden_dim())];
        let mut states = Vec::with_capacity(nodes.len());
        let mut diverged = false;
        let first = self.eval(nodes[0], x0.to_vec(), e0.to_vec(), &hidden0);
        if exceeds(&first, cfg.divergence_threshold) {
            return Ok(RunRecord {
                nodes: nodes[..1].to_vec(),
                states: vec![first],
                diverged: true,
            });
        }
        states.push(first);
        for n in 0..nodes.len() - 1 {
            let cur = &states[n];
            let next = nodes[n + 1];
            let h = next.t - nodes[n].t;
            let state = if h <= 0.0 {
                let mut e = cur.e.clone();
                if next.segment != nodes[n].segment {
                    if let Some(d) = self.dynamics {
                        d.reset_at_switch(next.t, &mut e);
                    }
                }
                self.eval(next, cur.x.clone(), e, &cur.hidden_out)
            } else {
                match self.step(n, nodes[n], next, cur, cfg) {
                    Ok(s) => s,
                    Err(Error::NonConvergence { change, .. }) if !change.is_finite() => {
                        diverged = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            };
            if exceeds(&state, cfg.divergence_threshold) {
                states.push(state);
                diverged = true;
                break;
            }
            states.push(state);
        }
        Ok(RunRecord {
            nodes: nodes[..states.len()].to_vec(),
            states,
            diverged,
        })
    }

    fn step(&self, index: usize, node: Node, next: Node, cur: &NodeState, cfg: &SimConfig) -> Result<NodeState> {
        let h = next.t - node.t;
        let seg = next.segment;
        let elim = self.eliminated(seg);
        let e_p: Vec<f64> = cur.e.iter().zip(&cur.g).map(|(e, g)| e + h * g).collect();
        let region = self.region;
        let (x1, _) = trapezoid_step(
            h,
            &cur.x,
            &cur.f,
            |xk| {
                let v = elim.voltages(xk, &e_p);
                let mut f = vec![0.0; xk.len()];
                rhs_into(region, xk, &v, &mut f);
                f
            },
            cfg.newton_tol,
            cfg.max_newton_iters,
        )
        .map_err(|change| Error::NonConvergence { step: index, change })?;
        let e1 = match self.dynamics {
            Some(d) => {
                let v_p = elim.voltages(&x1, &e_p);
                let mut g_p = vec![0.0; e_p.len()];
                let mut scratch = Vec::new();
                d.derivative(next.t, &x1, &e_p, &v_p, &cur.hidden_out, &mut g_p, &mut scratch);
                cur.e
                    .iter()
                    .zip(cur.g.iter().zip(&g_p))
                    .map(|(e, (g0, g1))| e + 0.5 * h * (g0 + g1))
                    .collect()
            }
            None => Vec::new(),
        };
        Ok(self.eval(next, x1, e1, &cur.hidden_out))
    }
}

fn exceeds(s: &NodeState, bound: f64) -> bool {
    s.x.iter()
        .chain(&s.e)
        .any(|v| !v.is_finite() || v.abs() > bound)
        || s.v.iter().any(|v| !v.norm().is_finite())
}

/// Network factorizations for pre-fault, fault-on and post-fault topology.
pub fn segment_solvers(region: &Region, scenario: Option<&FaultScenario>, extra: Option<&DMatrix<C64>>) -> Result<Vec<NetworkSolver>> {
    let normal = NetworkSolver::new(region.admittance(None, extra)?)?;
    match scenario {
        None => Ok(vec![normal]),
        Some(f) => {
            let faulted = NetworkSolver::new(region.admittance(Some(f), extra)?)?;
            Ok(vec![normal.clone(), faulted, normal])
        }
    }
}

/// Neural external equivalent: `de/dt = N(e, z)` with `z` linear in the
/// hybrid state.
pub struct NeuralDynamics<'a> {
    pub model: &'a NeuralEquivalence,
    pub features: LinearFeatureMap,
    offset: Vec<f64>,
    ws: RefCell<Workspace>,
}

impl<'a> NeuralDynamics<'a> {
    pub fn new(model: &'a NeuralEquivalence, features: LinearFeatureMap) -> Self {
        let mut ws = Workspace::default();
        Self {
            model,
            features,
            offset: model.offset(&mut ws),
            ws: RefCell::new(ws),
        }
    }
}

impl ExplicitDynamics for NeuralDynamics<'_> {
    fn dim(&self) -> usize {
        self.model.n_out()
    }

    fn hidden_dim(&self) -> usize {
        self.model.hidden_dim()
    }

    fn derivative(&self, _t: f64, x: &[f64], e: &[f64], v: &[C64], hidden: &[f64], out: &mut [f64], hidden_out: &mut Vec<f64>) {
        let z = self.features.eval(x, e, v);
        let mut ws = self.ws.borrow_mut();
        self.model.forward_ws(e, &z, hidden, &mut ws);
        for ((o, y), c) in out.iter_mut().zip(ws.output()).zip(&self.offset) {
            *o = y - c;
        }
        hidden_out.clear();
        if self.model.recurrent.is_some() {
            hidden_out.extend_from_slice(ws.hidden());
        }
    }
}

/// External linear current sources `ds/dt = a (s - s0) + b (V - V0)`.
struct LinearSources {
    a: Vec<C64>,
    b: Vec<C64>,
    s0: Vec<C64>,
    v0: Vec<C64>,
    sites: Vec<usize>,
}

impl ExplicitDynamics for LinearSources {
    fn dim(&self) -> usize {
        2 * self.a.len()
    }

    fn derivative(&self, _t: f64, _x: &[f64], e: &[f64], v: &[C64], _hidden: &[f64], out: &mut [f64], _hidden_out: &mut Vec<f64>) {
        for k in 0..self.a.len() {
            let s = C64::new(e[2 * k], e[2 * k + 1]);
            let d = self.a[k] * (s - self.s0[k]) + self.b[k] * (v[self.sites[k]] - self.v0[k]);
            out[2 * k] = d.re;
            out[2 * k + 1] = d.im;
        }
    }
}

pub(crate) fn gen_names(region: &Region) -> Vec<String> {
    region
        .machines
        .iter()
        .flat_map(|m| [format!("gen{}.delta", m.gen_index + 1), format!("gen{}.omega", m.gen_index + 1)])
        .collect()
}

pub(crate) fn complex_names(prefix: &str, what: &str, ids: impl IntoIterator<Item = usize>) -> Vec<String> {
    ids.into_iter()
        .flat_map(|k| [format!("{prefix}{k}.{what}.re"), format!("{prefix}{k}.{what}.im")])
        .collect()
}

/// Equilibrium tie currents (external to internal) from a power flow.
pub fn equilibrium_tie_currents(grid: &GridModel, partition: &Partition, pf: &PowerFlowSolution) -> Vec<C64> {
    partition
        .tie_lines
        .iter()
        .map(|t| {
            let y = grid.branches[t.branch].admittance();
            y * (pf.voltages[t.external_bus - 1] - pf.voltages[t.internal_bus - 1])
        })
        .collect()
}

/// Ground-truth simulation of the whole grid. With a partition, tie
/// currents and port voltages are emitted as well.
pub fn simulate_full(grid: &GridModel, scenario: Option<&FaultScenario>, cfg: &SimConfig, partition: Option<&Partition>) -> Result<Trajectory> {
    cfg.validate()?;
    if let Some(s) = scenario {
        s.validate(grid)?;
    }
    let pf = solve_power_flow(grid)?;
    let region = Region::full(grid, &pf)?;
    let solvers = segment_solvers(&region, scenario, None)?;
    let x0 = region.equilibrium(grid, &pf)?;
    let sites: Vec<usize> = grid
        .linear_sources
        .iter()
        .map(|s| region.local(s.bus).expect("full region holds every bus"))
        .collect();
    let sources = LinearSources {
        a: grid.linear_sources.iter().map(|s| s.a()).collect(),
        b: grid.linear_sources.iter().map(|s| s.b()).collect(),
        s0: grid
            .linear_sources
            .iter()
            .map(|s| (pf.injections[s.bus - 1] / pf.voltages[s.bus - 1]).conj())
            .collect(),
        v0: grid.linear_sources.iter().map(|s| pf.voltages[s.bus - 1]).collect(),
        sites: sites.clone(),
    };
    let e0: Vec<f64> = sources.s0.iter().flat_map(|s| [s.re, s.im]).collect();
    let engine = Engine {
        region: &region,
        solvers: &solvers,
        sites: &sites,
        dynamics: if sites.is_empty() { None } else { Some(&sources) },
    };
    let nodes = schedule(0.0, cfg.dt, cfg.t_end, scenario);
    let rec = engine.run(&nodes, &x0, &e0, cfg)?;

    let mut names = gen_names(&region);
    names.extend(complex_names("bus", "v", region.bus_ids.iter().copied()));
    if let Some(p) = partition {
        names.extend(complex_names("tie", "i", 1..=p.n_ports()));
        names.extend(complex_names("port", "v", 1..=p.n_ports()));
    }
    let mut traj = Trajectory::new(cfg.dt, 0.0, names)?;
    let mut row = Vec::new();
    for (node, s) in rec.nodes.iter().zip(&rec.states) {
        row.clear();
        row.extend_from_slice(&s.x);
        row.extend(s.v.iter().flat_map(|v| [v.re, v.im]));
        if let Some(p) = partition {
            for t in &p.tie_lines {
                let y = grid.branches[t.branch].admittance();
                let i = y * (s.v[t.external_bus - 1] - s.v[t.internal_bus - 1]);
                row.extend([i.re, i.im]);
            }
            for &b in &p.ports {
                row.extend([s.v[b - 1].re, s.v[b - 1].im]);
            }
        }
        traj.push_row(node.t, &row);
    }
    traj.diverged = rec.diverged;
    Ok(traj)
}

/// The internal system prepared for a hybrid run: factorizations per
/// segment, injection sites (one per tie line), equilibrium initial states
/// and the compiled feature map.
pub struct Hybrid {
    pub region: Region,
    pub solvers: Vec<NetworkSolver>,
    pub sites: Vec<usize>,
    pub x0: Vec<f64>,
    pub e0: Vec<f64>,
    pub features: LinearFeatureMap,
    /// Norton admittance for the driving-port variant.
    pub d: Option<DMatrix<C64>>,
}

impl Hybrid {
    fn base(grid: &GridModel, partition: &Partition) -> Result<(PowerFlowSolution, Region, Vec<usize>)> {
        let pf = solve_power_flow(grid)?;
        let region = Region::internal(grid, partition, &pf)?;
        let sites = partition
            .ports
            .iter()
            .map(|&b| region.local(b).expect("ports are internal"))
            .collect();
        Ok((pf, region, sites))
    }

    /// Tie currents are the explicit states.
    pub fn pi(grid: &GridModel, partition: &Partition, selector: &FeatureSelector, scenario: Option<&FaultScenario>) -> Result<Self> {
        let (pf, region, sites) = Self::base(grid, partition)?;
        let solvers = segment_solvers(&region, scenario, None)?;
        let features = selector.compile(grid, partition, &region, &TieSource::State)?;
        let x0 = region.equilibrium(grid, &pf)?;
        let e0 = equilibrium_tie_currents(grid, partition, &pf)
            .iter()
            .flat_map(|i| [i.re, i.im])
            .collect();
        Ok(Self {
            region,
            solvers,
            sites,
            x0,
            e0,
            features,
            d: None,
        })
    }

    /// Norton pair at the ports: `-D` folded into the admittance, the
    /// continuous components as explicit states.
    pub fn dp(grid: &GridModel, partition: &Partition, d: &DMatrix<C64>, selector: &FeatureSelector, scenario: Option<&FaultScenario>) -> Result<Self> {
        let np = partition.n_ports();
        if d.nrows() != np || d.ncols() != np {
            return Err(Error::Dimension {
                what: "port admittance",
                expected: np,
                got: d.nrows(),
            });
        }
        let (pf, region, sites) = Self::base(grid, partition)?;
        let mut extra = DMatrix::zeros(region.n_bus(), region.n_bus());
        for (r, &sr) in sites.iter().enumerate() {
            for (c, &sc) in sites.iter().enumerate() {
                extra[(sr, sc)] -= d[(r, c)];
            }
        }
        let solvers = segment_solvers(&region, scenario, Some(&extra))?;
        let features = selector.compile(grid, partition, &region, &TieSource::Norton(d.clone()))?;
        let x0 = region.equilibrium(grid, &pf)?;
        let v_p: Vec<C64> = partition.ports.iter().map(|&b| pf.voltages[b - 1]).collect();
        let i_tie = equilibrium_tie_currents(grid, partition, &pf);
        let e0 = (0..np)
            .flat_map(|k| {
                let dv: C64 = (0..np).map(|c| d[(k, c)] * v_p[c]).sum();
                let cs = i_tie[k] - dv;
                [cs.re, cs.im]
            })
            .collect();
        Ok(Self {
            region,
            solvers,
            sites,
            x0,
            e0,
            features,
            d: Some(d.clone()),
        })
    }

    pub fn engine<'a>(&'a self, dynamics: &'a dyn ExplicitDynamics) -> Engine<'a> {
        Engine {
            region: &self.region,
            solvers: &self.solvers,
            sites: &self.sites,
            dynamics: Some(dynamics),
        }
    }

    /// Channel names: internal machines, internal buses, ties, ports, and
    /// the continuous components for the driving-port variant.
    pub fn channel_names(&self) -> Vec<String> {
        let np = self.sites.len();
        let mut names = gen_names(&self.region);
        names.extend(complex_names("bus", "v", self.region.bus_ids.iter().copied()));
        names.extend(complex_names("tie", "i", 1..=np));
        names.extend(complex_names("port", "v", 1..=np));
        if self.d.is_some() {
            names.extend(complex_names("tiecs", "i", 1..=np));
        }
        names
    }

    /// Tie currents implied by a node state.
    pub fn tie_currents(&self, s: &NodeState) -> Vec<C64> {
        let np = self.sites.len();
        (0..np)
            .map(|k| {
                let mut i = C64::new(s.e[2 * k], s.e[2 * k + 1]);
                if let Some(d) = &self.d {
                    for (c, &site) in self.sites.iter().enumerate() {
                        i += d[(k, c)] * s.v[site];
                    }
                }
                i
            })
            .collect()
    }

    pub fn trajectory(&self, rec: &RunRecord, dt: f64) -> Result<Trajectory> {
        let mut traj = Trajectory::new(dt, rec.nodes[0].t, self.channel_names())?;
        let mut row = Vec::new();
        for (node, s) in rec.nodes.iter().zip(&rec.states) {
            row.clear();
            row.extend_from_slice(&s.x);
            row.extend(s.v.iter().flat_map(|v| [v.re, v.im]));
            row.extend(self.tie_currents(s).iter().flat_map(|i| [i.re, i.im]));
            row.extend(self.sites.iter().flat_map(|&b| [s.v[b].re, s.v[b].im]));
            if self.d.is_some() {
                row.extend_from_slice(&s.e);
            }
            traj.push_row(node.t, &row);
        }
        traj.diverged = rec.diverged;
        Ok(traj)
    }

    /// Run with arbitrary explicit dynamics from the equilibrium.
    pub fn simulate(&self, dynamics: &dyn ExplicitDynamics, scenario: Option<&FaultScenario>, cfg: &SimConfig) -> Result<Trajectory> {
        cfg.validate()?;
        let nodes = schedule(0.0, cfg.dt, cfg.t_end, scenario);
        let rec = self.engine(dynamics).run(&nodes, &self.x0, &self.e0, cfg)?;
        self.trajectory(&rec, cfg.dt)
    }
}

fn check_partition(model: &NeuralEquivalence, partition: &Partition) -> Result<()> {
    if model.n_out() != 2 * partition.n_ports() {
        return Err(Error::Dimension {
            what: "model output",
            expected: 2 * partition.n_ports(),
            got: model.n_out(),
        });
    }
    if !model.meta.partition_hash.is_empty() && model.meta.partition_hash != partition.fingerprint() {
        return Err(Error::Validation("model was trained for a different partition".into()));
    }
    Ok(())
}

fn check_fault(partition: &Partition, scenario: Option<&FaultScenario>) -> Result<()> {
    match scenario {
        Some(s) if !partition.is_internal(s.fault_bus) => Err(Error::FaultOutsideModeledRegion(s.fault_bus)),
        _ => Ok(()),
    }
}

/// Internal physics plus a neural tie-current equivalent.
pub fn simulate_hybrid_pi(
    grid: &GridModel,
    partition: &Partition,
    model: &NeuralEquivalence,
    scenario: Option<&FaultScenario>,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    model.validate()?;
    check_partition(model, partition)?;
    check_fault(partition, scenario)?;
    let selector = FeatureSelector::parse(&model.feature_spec)?;
    let hybrid = Hybrid::pi(grid, partition, &selector, scenario)?;
    let dynamics = NeuralDynamics::new(model, hybrid.features.clone());
    hybrid.simulate(&dynamics, scenario, cfg)
}

/// Internal physics plus a Norton equivalent (`D` and neural current
/// sources) at the ports.
pub fn simulate_hybrid_dp(grid: &GridModel, partition: &Partition, dp: &DpModel, scenario: Option<&FaultScenario>, cfg: &SimConfig) -> Result<Trajectory> {
    dp.net.validate()?;
    check_partition(&dp.net, partition)?;
    check_fault(partition, scenario)?;
    if dp.port_order != partition.ports {
        return Err(Error::Validation("driving-port model was estimated for different ports".into()));
    }
    let selector = FeatureSelector::parse(&dp.net.feature_spec)?;
    let hybrid = Hybrid::dp(grid, partition, &dp.d_matrix, &selector, scenario)?;
    let dynamics = NeuralDynamics::new(&dp.net, hybrid.features.clone());
    hybrid.simulate(&dynamics, scenario, cfg)
}

#[cfg(test)]
mod tests;
