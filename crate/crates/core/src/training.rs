//! Continuous-time training of the neural equivalent.
//!
//! A training window is integrated with exactly the scheme the simulator
//! uses (implicit trapezoid for machines, Heun for the neural state) and the
//! gradient is the exact derivative of that discrete solution, obtained by
//! sweeping the adjoint of each step backwards. Two window kinds exist:
//!
//! * closed loop: internal physics and the net co-simulated, features
//!   produced by the network solve;
//! * teacher forced: the features are read from the measurements and only
//!   the neural state is integrated.
//!
//! The gradient ignores the dependence of the recurrent hidden state on
//! earlier steps, so it is exact for feed-forward nets only.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{EliminatedJacobians, LinearFeatureMap};
use crate::grid::{FaultScenario, GridModel, Partition};
use crate::neuralnet::{Activation, Anchor, FeatureSelector, ModelMeta, NeuralEquivalence, Variant, Workspace};
use crate::simulator::{complex_names, gen_names, segments_for_times, Engine, Hybrid, NeuralDynamics, Node, RunRecord, SimConfig, Trajectory};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Which states enter the closed-loop loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Neural state only.
    ExOnly,
    /// Neural state and internal machine states.
    Pi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub max_iters: usize,
    pub tol: f64,
    /// Windows per gradient step, 0 for all.
    pub batch: usize,
    pub window_s: f64,
    pub dt: f64,
    pub seed: u64,
    /// Hidden layer sizes.
    pub arch: Vec<usize>,
    pub activation: Activation,
    pub variant: Variant,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Observation weight applied at every sample.
    pub eta: f64,
    pub loss: LossVariant,
    /// Explicit feature channels; the variant default when absent.
    pub features: Option<Vec<String>>,
    /// Window start relative to the fault instant.
    pub lead_s: f64,
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    pub divergence_threshold: f64,
    /// Loss reported for a window whose forward pass diverged.
    pub divergence_sentinel: f64,
    /// Pin the net to a zero derivative at the first sample of the first
    /// window, normally the pre-fault operating point. Ignored by the
    /// recurrent variant.
    pub anchor: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            max_iters: 3000,
            tol: 1e-8,
            batch: 0,
            window_s: 3.0,
            dt: 0.005,
            seed: 42,
            arch: vec![64, 64],
            activation: Activation::Tanh,
            variant: Variant::Pi,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eta: 1.0,
            loss: LossVariant::Pi,
            features: None,
            lead_s: 0.1,
            newton_tol: 1e-10,
            max_newton_iters: 50,
            divergence_threshold: 1e3,
            divergence_sentinel: 1e6,
            anchor: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("dt", self.dt),
            ("newton_tol", self.newton_tol),
            ("divergence_threshold", self.divergence_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if !(self.tol >= 0.0) || !(self.eta >= 0.0) || !(self.lead_s >= 0.0) {
            return Err(Error::Validation("tol, eta and lead_s must be non-negative".into()));
        }
        if !(self.window_s >= 2.0 * self.dt) {
            return Err(Error::Validation("window must span at least two steps".into()));
        }
        if self.optimizer == OptimizerKind::Adam
            && !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0)
        {
            return Err(Error::Validation("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        if self.arch.iter().any(|&s| s == 0) {
            return Err(Error::Validation("hidden layers must be non-empty".into()));
        }
        if self.variant == Variant::DpRnn && self.arch.is_empty() {
            return Err(Error::Validation("the recurrent variant needs a hidden layer".into()));
        }
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            dt: self.dt,
            t_end: self.window_s,
            newton_tol: self.newton_tol,
            max_newton_iters: self.max_newton_iters,
            divergence_threshold: self.divergence_threshold,
        }
    }

    /// Feature selector for this configuration.
    pub fn selector(&self, grid: &GridModel, partition: &Partition) -> Result<FeatureSelector> {
        match &self.features {
            Some(names) => FeatureSelector::parse(names),
            None => Ok(match self.variant {
                Variant::Dp | Variant::DpRnn => FeatureSelector::ports(partition),
                Variant::Pi | Variant::Discrete => FeatureSelector::rich(grid, partition),
            }),
        }
    }
}

/// Moment estimates of the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// One update `theta <- theta - step(grad)`.
pub fn optimizer_step(state: &mut OptimizerState, theta: &mut [f64], grad: &[f64], cfg: &TrainConfig) -> Result<()> {
    if theta.len() != grad.len() {
        return Err(Error::Dimension {
            what: "gradient",
            expected: theta.len(),
            got: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for (t, g) in theta.iter_mut().zip(grad) {
                *t -= cfg.lr * g;
            }
        }
        OptimizerKind::Adam => {
            if state.m.len() != theta.len() {
                state.m = vec![0.0; theta.len()];
                state.v = vec![0.0; theta.len()];
                state.t = 0;
            }
            state.t += 1;
            let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
            let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
            for i in 0..theta.len() {
                state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
                state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
                let mh = state.m[i] / c1;
                let vh = state.v[i] / c2;
                theta[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
    Ok(())
}

/// A recorded run and the fault it was produced under.
#[derive(Clone, Debug)]
pub struct Sample {
    pub trajectory: Trajectory,
    pub scenario: Option<FaultScenario>,
}

/// Internal physics co-simulated with the net.
pub struct ClosedWindow {
    pub hybrid: Hybrid,
    pub nodes: Vec<Node>,
    pub x0: Vec<f64>,
    pub e0: Vec<f64>,
    pub x_hat: Vec<Vec<f64>>,
    pub e_hat: Vec<Vec<f64>>,
    /// Measured bus voltages of the internal region, interleaved.
    pub v_hat: Vec<Vec<f64>>,
    /// Per-node loss weight; zero on pre-switch copies.
    pub weights: Vec<f64>,
}

/// Neural state integrated against measured features.
#[derive(Clone, Debug)]
pub struct TeacherWindow {
    pub times: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub e_hat: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

pub enum Window {
    Closed(Box<ClosedWindow>),
    Teacher(TeacherWindow),
}

impl Window {
    fn n_nodes(&self) -> usize {
        match self {
            Window::Closed(w) => w.nodes.len(),
            Window::Teacher(w) => w.times.len(),
        }
    }

    fn times(&self) -> Vec<f64> {
        match self {
            Window::Closed(w) => w.nodes.iter().map(|n| n.t).collect(),
            Window::Teacher(w) => w.times.clone(),
        }
    }

    fn e_hat(&self) -> &[Vec<f64>] {
        match self {
            Window::Closed(w) => &w.e_hat,
            Window::Teacher(w) => &w.e_hat,
        }
    }

    /// Features along the measurements.
    fn z_hat(&self) -> Vec<Vec<f64>> {
        match self {
            Window::Closed(w) => (0..w.nodes.len())
                .map(|n| {
                    let v = crate::linalg::join(&w.v_hat[n]);
                    w.hybrid.features.eval(&w.x_hat[n], &w.e_hat[n], &v)
                })
                .collect(),
            Window::Teacher(w) => w.z.clone(),
        }
    }
}

/// Training windows cut from a dataset.
pub struct Problem {
    pub windows: Vec<Window>,
    pub selector: FeatureSelector,
    pub n_state: usize,
}

fn check_dt(t: &Trajectory, dt: f64) -> Result<()> {
    if (t.dt - dt).abs() > 1e-9 * dt {
        return Err(Error::Validation(format!("data step {} differs from configured dt {dt}", t.dt)));
    }
    Ok(())
}

fn window_rows(t: &Trajectory, scenario: Option<&FaultScenario>, cfg: &TrainConfig) -> Result<Vec<usize>> {
    check_dt(t, cfg.dt)?;
    let t_first = t.times[0];
    let start = scenario.map_or(t_first, |s| (s.t_fault - cfg.lead_s).max(t_first));
    let tol = 1e-9 * cfg.dt;
    let rows: Vec<usize> = (0..t.n_rows())
        .filter(|&i| t.times[i] >= start - tol && t.times[i] <= start + cfg.window_s + tol)
        .collect();
    if rows.len() < 2 {
        return Err(Error::Validation("training window holds fewer than two samples".into()));
    }
    if !t.is_finite() {
        return Err(Error::Validation("training data contains non-finite values".into()));
    }
    Ok(rows)
}

fn columns(t: &Trajectory, names: &[String]) -> Result<Vec<usize>> {
    names.iter().map(|n| t.channel_index(n)).collect()
}

fn gather(t: &Trajectory, rows: &[usize], cols: &[usize]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|&r| cols.iter().map(|&c| t.value(r, c)).collect())
        .collect()
}

fn weights(times: &[f64], eta: f64) -> Vec<f64> {
    (0..times.len())
        .map(|i| if i + 1 < times.len() && times[i + 1] == times[i] { 0.0 } else { eta })
        .collect()
}

impl Problem {
    /// Closed-loop windows: the net drives the tie currents of the internal
    /// system.
    pub fn closed_loop(grid: &GridModel, partition: &Partition, dataset: &[Sample], selector: &FeatureSelector, cfg: &TrainConfig) -> Result<Self> {
        let mut windows = Vec::with_capacity(dataset.len());
        let mut n_state = 0;
        for s in dataset {
            if let Some(f) = &s.scenario {
                if !partition.is_internal(f.fault_bus) {
                    return Err(Error::FaultOutsideModeledRegion(f.fault_bus));
                }
            }
            let hybrid = Hybrid::pi(grid, partition, selector, s.scenario.as_ref())?;
            let t = &s.trajectory;
            let rows = window_rows(t, s.scenario.as_ref(), cfg)?;
            let times: Vec<f64> = rows.iter().map(|&r| t.times[r]).collect();
            let nodes = segments_for_times(&times, s.scenario.as_ref());
            let xc = columns(t, &gen_names(&hybrid.region))?;
            let ec = columns(t, &complex_names("tie", "i", 1..=partition.n_ports()))?;
            let vc = columns(t, &complex_names("bus", "v", hybrid.region.bus_ids.iter().copied()))?;
            let x_hat = gather(t, &rows, &xc);
            let e_hat = gather(t, &rows, &ec);
            let v_hat = gather(t, &rows, &vc);
            n_state = xc.len();
            windows.push(Window::Closed(Box::new(ClosedWindow {
                x0: x_hat[0].clone(),
                e0: e_hat[0].clone(),
                weights: weights(&times, cfg.eta),
                hybrid,
                nodes,
                x_hat,
                e_hat,
                v_hat,
            })));
        }
        Ok(Self {
            windows,
            selector: selector.clone(),
            n_state,
        })
    }

    /// Teacher-forced windows over named state and feature channels.
    pub fn teacher(dataset: &[Sample], state: &[String], selector: &FeatureSelector, cfg: &TrainConfig) -> Result<Self> {
        let names = selector.names();
        let mut windows = Vec::with_capacity(dataset.len());
        for s in dataset {
            let t = &s.trajectory;
            let rows = window_rows(t, s.scenario.as_ref(), cfg)?;
            let times: Vec<f64> = rows.iter().map(|&r| t.times[r]).collect();
            let z = gather(t, &rows, &columns(t, &names)?);
            let e_hat = gather(t, &rows, &columns(t, state)?);
            windows.push(Window::Teacher(TeacherWindow {
                weights: weights(&times, cfg.eta),
                times,
                z,
                e_hat,
            }));
        }
        Ok(Self {
            windows,
            selector: selector.clone(),
            n_state: 0,
        })
    }

    /// Per-channel (mean, std) of `[e; z]` and of the measured slopes of `e`.
    pub fn normalization(&self) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        let mut inputs: Vec<Vec<f64>> = Vec::new();
        let mut slopes: Vec<Vec<f64>> = Vec::new();
        for w in &self.windows {
            let e = w.e_hat();
            let z = w.z_hat();
            let times = w.times();
            for n in 0..w.n_nodes() {
                inputs.push(e[n].iter().chain(&z[n]).copied().collect());
                if n + 1 < w.n_nodes() {
                    let h = times[n + 1] - times[n];
                    if h > 0.0 {
                        slopes.push(e[n + 1].iter().zip(&e[n]).map(|(a, b)| (a - b) / h).collect());
                    }
                }
            }
        }
        (stats(&inputs), stats(&slopes))
    }
}

fn stats(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let n = rows.len() as f64;
    (0..first.len())
        .map(|c| {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            [mean, if std > 1e-8 * (1.0 + mean.abs()) { std } else { 1.0 }]
        })
        .collect()
}

/// Adjoint of a window at its initial time together with the parameter
/// gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdjointState {
    /// Cotangent of the initial neural state.
    pub lambda: Vec<f64>,
    /// Cotangent of the initial machine states (closed loop only).
    pub mu: Vec<f64>,
    pub g: Vec<f64>,
}

/// Outcome of one window's forward and backward pass.
#[derive(Clone, Debug)]
pub struct WindowGradient {
    pub loss: f64,
    pub adjoint: AdjointState,
    pub diverged: bool,
}

struct Teacher {
    e: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    diverged: bool,
}

fn teacher_forward(model: &NeuralEquivalence, w: &TeacherWindow, bound: f64, ws: &mut Workspace) -> Teacher {
    let n = w.times.len();
    let offset = model.offset(ws);
    let mut eval = |e: &[f64], z: &[f64], hidden: &[f64]| -> (Vec<f64>, Vec<f64>) {
        model.forward_ws(e, z, hidden, ws);
        let h = if model.recurrent.is_some() { ws.hidden().to_vec() } else { Vec::new() };
        (ws.output().iter().zip(&offset).map(|(y, c)| y - c).collect(), h)
    };
    let h0 = vec![0.0; model.hidden_dim()];
    let e0 = w.e_hat[0].clone();
    let (g0, hid0) = eval(&e0, &w.z[0], &h0);
    let mut out = Teacher {
        e: vec![e0],
        g: vec![g0],
        hidden: vec![hid0],
        diverged: false,
    };
    for k in 0..n - 1 {
        let h = w.times[k + 1] - w.times[k];
        let (e, g) = (&out.e[k], &out.g[k]);
        let e1: Vec<f64> = if h > 0.0 {
            let e_p: Vec<f64> = e.iter().zip(g).map(|(e, g)| e + h * g).collect();
            let (g_p, _) = eval(&e_p, &w.z[k + 1], &out.hidden[k]);
            e.iter().zip(g.iter().zip(&g_p)).map(|(e, (a, b))| e + 0.5 * h * (a + b)).collect()
        } else {
            e.clone()
        };
        let (g1, hid1) = eval(&e1, &w.z[k + 1], &out.hidden[k]);
        let bad = g1.iter().any(|v| !v.is_finite()) || e1.iter().any(|v| !v.is_finite() || v.abs() > bound);
        out.e.push(e1);
        out.g.push(g1);
        out.hidden.push(hid1);
        if bad {
            out.diverged = true;
            break;
        }
    }
    out
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

/// `dst += m^T v`.
fn add_tr_mul(dst: &mut [f64], m: &DMatrix<f64>, v: &[f64]) {
    for c in 0..m.ncols() {
        let mut s = 0.0;
        for r in 0..m.nrows() {
            s += m[(r, c)] * v[r];
        }
        dst[c] += s;
    }
}

fn residual_loss(w: f64, a: &[f64], b: &[f64]) -> f64 {
    0.5 * w * a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
}

fn teacher_gradient(model: &NeuralEquivalence, w: &TeacherWindow, cfg: &TrainConfig) -> WindowGradient {
    let mut ws = Workspace::default();
    let fw = teacher_forward(model, w, cfg.divergence_threshold, &mut ws);
    let np = model.n_params();
    if fw.diverged {
        return WindowGradient {
            loss: cfg.divergence_sentinel,
            adjoint: AdjointState {
                lambda: vec![0.0; model.n_out()],
                mu: Vec::new(),
                g: vec![0.0; np],
            },
            diverged: true,
        };
    }
    let n = w.times.len();
    let ne = model.n_out();
    let nz = model.n_features();
    let loss: f64 = (0..n).map(|k| residual_loss(w.weights[k], &fw.e[k], &w.e_hat[k])).sum();
    let mut gt = vec![0.0; np];
    let mut eb = vec![0.0; ne];
    let mut gb = vec![0.0; ne];
    let mut ge = vec![0.0; ne];
    let mut gz = vec![0.0; nz];
    let h0 = vec![0.0; model.hidden_dim()];
    // output cotangents summed over all evaluations, for the anchor term
    let mut vsum = vec![0.0; ne];
    let loss_grad = |k: usize, eb: &mut [f64]| {
        for i in 0..ne {
            eb[i] += w.weights[k] * (fw.e[k][i] - w.e_hat[k][i]);
        }
    };
    loss_grad(n - 1, &mut eb);
    for m in (0..n).rev() {
        if gb.iter().any(|&v| v != 0.0) {
            let hid = if m == 0 { &h0 } else { &fw.hidden[m - 1] };
            model.forward_ws(&fw.e[m], &w.z[m], hid, &mut ws);
            model.vjp(&mut ws, &gb, &mut ge, &mut gz, Some(&mut gt));
            add_scaled(&mut eb, &ge, 1.0);
            add_scaled(&mut vsum, &gb, 1.0);
        }
        if m == 0 {
            break;
        }
        let h = w.times[m] - w.times[m - 1];
        if h > 0.0 {
            let e_p: Vec<f64> = fw.e[m - 1].iter().zip(&fw.g[m - 1]).map(|(e, g)| e + h * g).collect();
            let gbp: Vec<f64> = eb.iter().map(|v| 0.5 * h * v).collect();
            model.forward_ws(&e_p, &w.z[m], &fw.hidden[m - 1], &mut ws);
            model.vjp(&mut ws, &gbp, &mut ge, &mut gz, Some(&mut gt));
            add_scaled(&mut vsum, &gbp, 1.0);
            for i in 0..ne {
                gb[i] = 0.5 * h * eb[i] + h * ge[i];
                eb[i] += ge[i];
            }
        } else {
            gb.iter_mut().for_each(|v| *v = 0.0);
        }
        loss_grad(m - 1, &mut eb);
    }
    model.offset_vjp(&mut ws, &vsum, &mut gt);
    WindowGradient {
        loss,
        adjoint: AdjointState {
            lambda: eb,
            mu: Vec::new(),
            g: gt,
        },
        diverged: false,
    }
}

fn closed_forward(model: &NeuralEquivalence, w: &ClosedWindow, cfg: &TrainConfig) -> Result<RunRecord> {
    let dynamics = NeuralDynamics::new(model, w.hybrid.features.clone());
    w.hybrid.engine(&dynamics).run(&w.nodes, &w.x0, &w.e0, &cfg.sim_config())
}

/// Local derivatives at one evaluation point of the coupled right-hand side.
struct Point<'a> {
    engine: &'a Engine<'a>,
    features: &'a LinearFeatureMap,
}

impl Point<'_> {
    fn jacobians(&self, seg: usize, x: &[f64], e: &[f64]) -> (EliminatedJacobians, Vec<f64>) {
        let elim = self.engine.eliminated(seg);
        let jac = elim.jacobians(x, e, self.features);
        let v = elim.voltages(x, e);
        (jac, self.features.eval(x, e, &v))
    }
}

fn closed_gradient(model: &NeuralEquivalence, w: &ClosedWindow, cfg: &TrainConfig, lv: LossVariant) -> Result<WindowGradient> {
    let rec = closed_forward(model, w, cfg)?;
    let np = model.n_params();
    let ne = model.n_out();
    let nx = w.x0.len();
    if rec.diverged {
        return Ok(WindowGradient {
            loss: cfg.divergence_sentinel,
            adjoint: AdjointState {
                lambda: vec![0.0; ne],
                mu: vec![0.0; nx],
                g: vec![0.0; np],
            },
            diverged: true,
        });
    }
    let cx = if lv == LossVariant::Pi { 1.0 } else { 0.0 };
    let st = &rec.states;
    let n = st.len();
    let loss: f64 = (0..n)
        .map(|k| residual_loss(w.weights[k], &st[k].e, &w.e_hat[k]) + cx * residual_loss(w.weights[k], &st[k].x, &w.x_hat[k]))
        .sum();
    let loss_grad = |k: usize, xb: &mut [f64], eb: &mut [f64]| {
        let wk = w.weights[k];
        for i in 0..ne {
            eb[i] += wk * (st[k].e[i] - w.e_hat[k][i]);
        }
        for i in 0..nx {
            xb[i] += cx * wk * (st[k].x[i] - w.x_hat[k][i]);
        }
    };
    let dynamics = NeuralDynamics::new(model, w.hybrid.features.clone());
    let engine = w.hybrid.engine(&dynamics);
    let point = Point {
        engine: &engine,
        features: &w.hybrid.features,
    };
    let mut ws = Workspace::default();
    let h0 = vec![0.0; model.hidden_dim()];
    let nz = model.n_features();
    let mut gt = vec![0.0; np];
    let mut xb = vec![0.0; nx];
    let mut eb = vec![0.0; ne];
    let mut fb = vec![0.0; nx];
    let mut gb = vec![0.0; ne];
    let mut ge = vec![0.0; ne];
    let mut gz = vec![0.0; nz];
    let mut vsum = vec![0.0; ne];
    loss_grad(n - 1, &mut xb, &mut eb);
    for m in (0..n).rev() {
        let node = rec.nodes[m];
        if gb.iter().chain(&fb).any(|&v| v != 0.0) {
            let (jac, z) = point.jacobians(node.segment, &st[m].x, &st[m].e);
            add_tr_mul(&mut xb, &jac.dp_dx, &fb);
            add_tr_mul(&mut eb, &jac.dp_dex, &fb);
            let hid = if m == 0 { &h0 } else { &st[m - 1].hidden_out };
            model.forward_ws(&st[m].e, &z, hid, &mut ws);
            model.vjp(&mut ws, &gb, &mut ge, &mut gz, Some(&mut gt));
            add_scaled(&mut vsum, &gb, 1.0);
            add_scaled(&mut eb, &ge, 1.0);
            add_tr_mul(&mut eb, &jac.dz_dex, &gz);
            add_tr_mul(&mut xb, &jac.dz_dx, &gz);
        }
        if m == 0 {
            break;
        }
        let prev = &st[m - 1];
        let h = node.t - rec.nodes[m - 1].t;
        if h > 0.0 {
            let e_p: Vec<f64> = prev.e.iter().zip(&prev.g).map(|(e, g)| e + h * g).collect();
            let (jac, z) = point.jacobians(node.segment, &st[m].x, &e_p);
            // predictor-stage net evaluation
            let gbp: Vec<f64> = eb.iter().map(|v| 0.5 * h * v).collect();
            model.forward_ws(&e_p, &z, &prev.hidden_out, &mut ws);
            model.vjp(&mut ws, &gbp, &mut ge, &mut gz, Some(&mut gt));
            add_scaled(&mut vsum, &gbp, 1.0);
            let mut big_x = xb.clone();
            add_tr_mul(&mut big_x, &jac.dz_dx, &gz);
            let mut ebp = ge.clone();
            add_tr_mul(&mut ebp, &jac.dz_dex, &gz);
            // implicit machine update: (I - h/2 dF/dx)^T w = X
            let mut a = DMatrix::<f64>::identity(nx, nx);
            a -= jac.dp_dx.transpose() * (0.5 * h);
            let wv = a
                .lu()
                .solve(&DVector::from_vec(big_x))
                .ok_or_else(|| Error::Numerical("singular trapezoid adjoint".into()))?;
            add_tr_mul(&mut ebp, &jac.dp_dex, &wv.iter().map(|v| 0.5 * h * v).collect::<Vec<_>>());
            for i in 0..nx {
                xb[i] = wv[i];
                fb[i] = 0.5 * h * wv[i];
            }
            for i in 0..ne {
                gb[i] = 0.5 * h * eb[i] + h * ebp[i];
                eb[i] += ebp[i];
            }
        } else {
            fb.iter_mut().for_each(|v| *v = 0.0);
            gb.iter_mut().for_each(|v| *v = 0.0);
        }
        loss_grad(m - 1, &mut xb, &mut eb);
    }
    model.offset_vjp(&mut ws, &vsum, &mut gt);
    Ok(WindowGradient {
        loss,
        adjoint: AdjointState { lambda: eb, mu: xb, g: gt },
        diverged: false,
    })
}

/// Loss of one window; the sentinel when the forward pass diverges.
pub fn window_loss(model: &NeuralEquivalence, w: &Window, cfg: &TrainConfig, lv: LossVariant) -> Result<(f64, bool)> {
    match w {
        Window::Teacher(t) => {
            let mut ws = Workspace::default();
            let fw = teacher_forward(model, t, cfg.divergence_threshold, &mut ws);
            if fw.diverged {
                return Ok((cfg.divergence_sentinel, true));
            }
            Ok(((0..t.times.len()).map(|k| residual_loss(t.weights[k], &fw.e[k], &t.e_hat[k])).sum(), false))
        }
        Window::Closed(c) => {
            let rec = closed_forward(model, c, cfg)?;
            if rec.diverged {
                return Ok((cfg.divergence_sentinel, true));
            }
            let cx = if lv == LossVariant::Pi { 1.0 } else { 0.0 };
            Ok((
                rec.states
                    .iter()
                    .enumerate()
                    .map(|(k, s)| residual_loss(c.weights[k], &s.e, &c.e_hat[k]) + cx * residual_loss(c.weights[k], &s.x, &c.x_hat[k]))
                    .sum(),
                false,
            ))
        }
    }
}

/// Loss and adjoint of one window.
pub fn adjoint_backward(model: &NeuralEquivalence, w: &Window, cfg: &TrainConfig, lv: LossVariant) -> Result<WindowGradient> {
    match w {
        Window::Teacher(t) => Ok(teacher_gradient(model, t, cfg)),
        Window::Closed(c) => closed_gradient(model, c, cfg, lv),
    }
}

/// Mean loss over the windows.
pub fn loss_continuous(model: &NeuralEquivalence, problem: &Problem, cfg: &TrainConfig, lv: LossVariant) -> Result<f64> {
    let losses: Vec<f64> = problem
        .windows
        .par_iter()
        .map(|w| window_loss(model, w, cfg, lv).map(|l| l.0))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Mean loss and gradient over a set of windows, reduced in window order.
pub fn batch_gradient(model: &NeuralEquivalence, windows: &[Window], cfg: &TrainConfig, lv: LossVariant) -> Result<(f64, Vec<f64>, usize)> {
    let parts: Vec<WindowGradient> = windows
        .par_iter()
        .map(|w| adjoint_backward(model, w, cfg, lv))
        .collect::<Result<_>>()?;
    let n = parts.len().max(1) as f64;
    let mut g = vec![0.0; model.n_params()];
    let mut loss = 0.0;
    let mut diverged = 0;
    for p in &parts {
        loss += p.loss;
        add_scaled(&mut g, &p.adjoint.g, 1.0 / n);
        diverged += p.diverged as usize;
    }
    Ok((loss / n, g, diverged))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    /// Wall time of each iteration, seconds.
    pub iter_time_s: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Training stopped because every window diverged repeatedly.
    pub aborted: bool,
    pub best_loss: f64,
    pub model: NeuralEquivalence,
}

impl TrainReport {
    pub fn mean_iter_time(&self) -> f64 {
        if self.iter_time_s.is_empty() {
            0.0
        } else {
            self.iter_time_s.iter().sum::<f64>() / self.iter_time_s.len() as f64
        }
    }
}

/// A fresh model for a problem: normalization from the data, a zero output
/// layer, so the untrained equivalent holds the tie injections constant,
/// and the anchor when configured.
pub fn initial_model(problem: &Problem, n_out: usize, cfg: &TrainConfig, meta: ModelMeta) -> Result<NeuralEquivalence> {
    let mut sizes = vec![n_out + problem.selector.dim()];
    sizes.extend(&cfg.arch);
    sizes.push(n_out);
    let recurrent = meta.variant == Variant::DpRnn;
    let mut model = NeuralEquivalence::new(sizes, cfg.activation, recurrent, cfg.seed, meta)?;
    let (inputs, outputs) = problem.normalization();
    if inputs.len() == model.n_in() {
        model.input_norm = inputs;
    }
    if outputs.len() == n_out {
        model.output_norm = outputs.iter().map(|&[_, s]| [0.0, s]).collect();
    }
    let nl = model.layer_sizes.len();
    let last = model.layer_sizes[nl - 2] * n_out + n_out;
    let len = model.theta.len();
    model.theta[len - last..].iter_mut().for_each(|t| *t = 0.0);
    model.feature_spec = problem.selector.names();
    if cfg.anchor && !recurrent {
        if let Some(w) = problem.windows.first() {
            model.anchor = Some(Anchor {
                x_ex: w.e_hat()[0].clone(),
                z_in: w.z_hat().swap_remove(0),
            });
        }
    }
    Ok(model)
}

/// Gradient descent on the windows of `problem`, keeping the parameters of
/// the lowest full-batch loss.
pub fn train_windows(model: &mut NeuralEquivalence, problem: &Problem, cfg: &TrainConfig, lv: LossVariant) -> Result<TrainReport> {
    cfg.validate()?;
    let mut params = model.params();
    let mut best = (f64::INFINITY, params.clone());
    let mut opt = OptimizerState::default();
    let mut report = TrainReport {
        loss_history: Vec::new(),
        grad_norm_history: Vec::new(),
        iter_time_s: Vec::new(),
        iterations: 0,
        converged: false,
        aborted: false,
        best_loss: f64::INFINITY,
        model: model.clone(),
    };
    let n = problem.windows.len();
    if n == 0 {
        return Err(Error::Validation("no training windows".into()));
    }
    let batch = if cfg.batch == 0 { n } else { cfg.batch.min(n) };
    let chunks: Vec<&[Window]> = problem.windows.chunks(batch).collect();
    let mut all_diverged = 0;
    let mut work = model.clone();
    for it in 0..cfg.max_iters {
        let start = Instant::now();
        work.set_params(&params);
        let windows = chunks[it % chunks.len()];
        let (loss, grad, diverged) = batch_gradient(&work, windows, cfg, lv)?;
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if batch == n && loss < best.0 {
            best = (loss, params.clone());
        }
        report.loss_history.push(loss);
        report.grad_norm_history.push(gnorm);
        report.iterations = it + 1;
        all_diverged = if diverged == windows.len() { all_diverged + 1 } else { 0 };
        if all_diverged >= 10 {
            report.aborted = true;
            report.iter_time_s.push(start.elapsed().as_secs_f64());
            break;
        }
        let k = report.loss_history.len();
        if k >= 2 && (report.loss_history[k - 1] - report.loss_history[k - 2]).abs() < cfg.tol {
            report.converged = true;
            report.iter_time_s.push(start.elapsed().as_secs_f64());
            break;
        }
        optimizer_step(&mut opt, &mut params, &grad, cfg)?;
        report.iter_time_s.push(start.elapsed().as_secs_f64());
        log::debug!("iter {it}: loss {loss:.6e} |g| {gnorm:.3e}");
    }
    if batch == n && best.0.is_finite() {
        params = best.1;
        report.best_loss = best.0;
    } else {
        report.best_loss = report.loss_history.last().copied().unwrap_or(f64::INFINITY);
    }
    model.set_params(&params);
    report.model = model.clone();
    Ok(report)
}

fn meta(variant: Variant, partition: &Partition) -> ModelMeta {
    ModelMeta {
        variant,
        partition_hash: partition.fingerprint(),
    }
}

/// Closed-loop physics-informed training of a tie-current equivalent.
pub fn train_pi_neudye(grid: &GridModel, partition: &Partition, dataset: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let selector = cfg.selector(grid, partition)?;
    let problem = Problem::closed_loop(grid, partition, dataset, &selector, cfg)?;
    let mut model = initial_model(&problem, 2 * partition.n_ports(), cfg, meta(Variant::Pi, partition))?;
    train_windows(&mut model, &problem, cfg, cfg.loss)
}

/// Mean over windows of `sum 1/2 eta |y - y_hat|^2`, where `y_hat` is the
/// measured difference quotient and `y` the trapezoidal average of the net
/// evaluated on the measurements. Returns the loss and its gradient.
pub fn discrete_loss(model: &NeuralEquivalence, problem: &Problem) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, Vec<f64>)> = problem
        .windows
        .par_iter()
        .map(|w| {
            let mut ws = Workspace::default();
            let e = w.e_hat();
            let z = w.z_hat();
            let times = w.times();
            let weights = match w {
                Window::Closed(c) => &c.weights,
                Window::Teacher(t) => &t.weights,
            };
            let ne = model.n_out();
            let mut g = vec![0.0; model.n_params()];
            let mut ge = vec![0.0; ne];
            let mut gz = vec![0.0; model.n_features()];
            let mut loss = 0.0;
            let offset = model.offset(&mut ws);
            let mut vsum = vec![0.0; ne];
            for k in 0..times.len() - 1 {
                let h = times[k + 1] - times[k];
                if h <= 0.0 {
                    continue;
                }
                let eta = weights[k + 1];
                model.forward_ws(&e[k], &z[k], &[], &mut ws);
                let a = ws.output().to_vec();
                model.forward_ws(&e[k + 1], &z[k + 1], &[], &mut ws);
                let b = ws.output().to_vec();
                let r: Vec<f64> = (0..ne).map(|i| 0.5 * (a[i] + b[i]) - offset[i] - (e[k + 1][i] - e[k][i]) / h).collect();
                loss += 0.5 * eta * r.iter().map(|v| v * v).sum::<f64>();
                let v: Vec<f64> = r.iter().map(|v| 0.5 * eta * v).collect();
                model.vjp(&mut ws, &v, &mut ge, &mut gz, Some(&mut g));
                model.forward_ws(&e[k], &z[k], &[], &mut ws);
                model.vjp(&mut ws, &v, &mut ge, &mut gz, Some(&mut g));
                add_scaled(&mut vsum, &v, 2.0);
            }
            model.offset_vjp(&mut ws, &vsum, &mut g);
            (loss, g)
        })
        .collect();
    let n = parts.len().max(1) as f64;
    let mut g = vec![0.0; model.n_params()];
    let mut loss = 0.0;
    for (l, gi) in &parts {
        loss += l / n;
        add_scaled(&mut g, gi, 1.0 / n);
    }
    (loss, g)
}

/// Open-loop derivative regression on the same windows and architecture as
/// the closed-loop method.
pub fn train_discrete_baseline(grid: &GridModel, partition: &Partition, dataset: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let selector = cfg.selector(grid, partition)?;
    let problem = Problem::closed_loop(grid, partition, dataset, &selector, cfg)?;
    let mut model = initial_model(&problem, 2 * partition.n_ports(), cfg, meta(Variant::Discrete, partition))?;
    train_discrete_problem(&mut model, &problem, cfg)
}

/// Gradient descent on [`discrete_loss`].
pub fn train_discrete_problem(model: &mut NeuralEquivalence, problem: &Problem, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let mut params = model.params();
    let mut opt = OptimizerState::default();
    let mut best = (f64::INFINITY, params.clone());
    let mut report = TrainReport {
        loss_history: Vec::new(),
        grad_norm_history: Vec::new(),
        iter_time_s: Vec::new(),
        iterations: 0,
        converged: false,
        aborted: false,
        best_loss: f64::INFINITY,
        model: model.clone(),
    };
    let mut work = model.clone();
    for it in 0..cfg.max_iters {
        let start = Instant::now();
        work.set_params(&params);
        let (loss, grad) = discrete_loss(&work, problem);
        if loss < best.0 {
            best = (loss, params.clone());
        }
        report.loss_history.push(loss);
        report.grad_norm_history.push(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
        report.iterations = it + 1;
        let k = report.loss_history.len();
        if k >= 2 && (report.loss_history[k - 1] - report.loss_history[k - 2]).abs() < cfg.tol {
            report.converged = true;
            report.iter_time_s.push(start.elapsed().as_secs_f64());
            break;
        }
        optimizer_step(&mut opt, &mut params, &grad, cfg)?;
        report.iter_time_s.push(start.elapsed().as_secs_f64());
    }
    if best.0.is_finite() {
        params = best.1;
        report.best_loss = best.0;
    }
    model.set_params(&params);
    report.model = model.clone();
    Ok(report)
}

/// Worst disagreement between the adjoint gradient and central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    /// `max_i |adjoint_i - fd_i| / max_i |fd_i|`, zero when both vanish.
    pub max_rel_error: f64,
    /// Parameter index of the largest absolute disagreement.
    pub worst_param: usize,
    pub adjoint: Vec<f64>,
    pub finite_difference: Vec<f64>,
}

/// Compare the adjoint gradient of the mean window loss with central
/// differences of step `step`.
pub fn grad_check(model: &NeuralEquivalence, problem: &Problem, cfg: &TrainConfig, lv: LossVariant, step: f64) -> Result<GradCheck> {
    let (_, adjoint, _) = batch_gradient(model, &problem.windows, cfg, lv)?;
    let p0 = model.params();
    let mut m = model.clone();
    let mut fd = vec![0.0; p0.len()];
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] = p0[i] + step;
        m.set_params(&p);
        let lp = loss_continuous(&m, problem, cfg, lv)?;
        p[i] = p0[i] - step;
        m.set_params(&p);
        let lm = loss_continuous(&m, problem, cfg, lv)?;
        fd[i] = (lp - lm) / (2.0 * step);
    }
    Ok(compare_gradients(adjoint, fd))
}

pub fn compare_gradients(adjoint: Vec<f64>, finite_difference: Vec<f64>) -> GradCheck {
    let scale = finite_difference.iter().chain(&adjoint).fold(0.0f64, |a, b| a.max(b.abs()));
    let (worst_param, worst) = adjoint
        .iter()
        .zip(&finite_difference)
        .map(|(a, f)| (a - f).abs())
        .enumerate()
        .fold((0, 0.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
    GradCheck {
        max_rel_error: if scale == 0.0 { 0.0 } else { worst / scale },
        worst_param,
        adjoint,
        finite_difference,
    }
}

#[cfg(test)]
mod tests;
