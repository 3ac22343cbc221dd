//! Driving-port equivalents. Tie currents split into an algebraic part
//! `D v_p` that follows the port voltages instantly and a continuous part
//! `i_cs = i_tie - D v_p` carried by a neural ODE.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::grid::{solve_power_flow, BusKind, FaultScenario, GridModel, Partition};
use crate::linalg::{complex_inverse, pinv, realify, split};
use crate::neuralnet::{Activation, FeatureSelector, ModelMeta, NeuralEquivalence, Variant};
use crate::simulator::{complex_names, Trajectory};
use crate::training::{initial_model, train_windows, LossVariant, Problem, Sample, TrainConfig, TrainReport};
use crate::{Error, Result, C64};

#[derive(Clone, Debug, PartialEq)]
pub struct DpModel {
    pub d_matrix: DMatrix<C64>,
    pub net: NeuralEquivalence,
    pub port_order: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Complex {
    re: f64,
    im: f64,
}

#[derive(Serialize, Deserialize)]
struct DpArtifact {
    d: Vec<Vec<Complex>>,
    net: NeuralEquivalence,
    ports: Vec<usize>,
}

impl DpModel {
    pub fn new(d_matrix: DMatrix<C64>, net: NeuralEquivalence, partition: &Partition) -> Result<Self> {
        let m = Self {
            d_matrix,
            net,
            port_order: partition.ports.clone(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let np = self.port_order.len();
        if self.d_matrix.nrows() != np || self.d_matrix.ncols() != np {
            return Err(Error::Dimension {
                what: "port admittance",
                expected: np,
                got: self.d_matrix.nrows(),
            });
        }
        if self.d_matrix.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Validation("port admittance has non-finite entries".into()));
        }
        self.net.validate()?;
        if self.net.n_out() != 2 * np {
            return Err(Error::Dimension {
                what: "driving-port net output",
                expected: 2 * np,
                got: self.net.n_out(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let art = DpArtifact {
            d: self
                .d_matrix
                .row_iter()
                .map(|r| r.iter().map(|z| Complex { re: z.re, im: z.im }).collect())
                .collect(),
            net: self.net.clone(),
            ports: self.port_order.clone(),
        };
        serde_json::to_string_pretty(&art).expect("artifact serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let art: DpArtifact = serde_json::from_str(s)?;
        let m = Self {
            d_matrix: d_from_rows(&art.d)?,
            net: art.net,
            port_order: art.ports,
        };
        m.validate()?;
        Ok(m)
    }
}

fn d_from_rows(rows: &[Vec<Complex>]) -> Result<DMatrix<C64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Validation("port admittance must be square".into()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| C64::new(rows[i][j].re, rows[i][j].im)))
}

/// Read a bare `[[{"re":..,"im":..},..],..]` matrix.
pub fn d_matrix_from_json(s: &str) -> Result<DMatrix<C64>> {
    let rows: Vec<Vec<Complex>> = serde_json::from_str(s)?;
    d_from_rows(&rows)
}

pub fn d_matrix_to_json(d: &DMatrix<C64>) -> String {
    let rows: Vec<Vec<Complex>> = d
        .row_iter()
        .map(|r| r.iter().map(|z| Complex { re: z.re, im: z.im }).collect())
        .collect();
    serde_json::to_string_pretty(&rows).expect("matrix serializes")
}

/// Port voltage and tie current steps across one switching instant.
#[derive(Clone, Debug, PartialEq)]
pub struct PortEvent {
    pub t_event: f64,
    pub dv: Vec<C64>,
    pub di: Vec<C64>,
    /// The instant was not on the sample grid and the straddling step was used.
    pub snapped: bool,
}

fn n_ports_of(t: &Trajectory) -> usize {
    (1..).take_while(|k| t.has_channel(&format!("tie{k}.i.re"))).count()
}

fn complex_columns(t: &Trajectory, prefix: &str, what: &str, np: usize) -> Result<Vec<Vec<C64>>> {
    let mut cols = Vec::with_capacity(np);
    for k in 1..=np {
        let re = t.column(&format!("{prefix}{k}.{what}.re")).map_err(|_| Error::MissingChannel(format!("{prefix}{k}.{what}.re")))?;
        let im = t.column(&format!("{prefix}{k}.{what}.im")).map_err(|_| Error::MissingChannel(format!("{prefix}{k}.{what}.im")))?;
        cols.push(re.into_iter().zip(im).map(|(a, b)| C64::new(a, b)).collect());
    }
    Ok(cols)
}

/// Rows just before and just after a switch at `t_s`.
fn switch_rows(t: &Trajectory, t_s: f64) -> Option<(usize, usize, bool)> {
    let tol = 1e-9 * t.dt.max(1e-6);
    let n = t.n_rows();
    if let Some(i) = (0..n.saturating_sub(1)).find(|&i| (t.times[i] - t_s).abs() <= tol && (t.times[i + 1] - t_s).abs() <= tol) {
        return Some((i, i + 1, false));
    }
    let k = (0..n.saturating_sub(1)).find(|&i| t.times[i] <= t_s + tol && t_s < t.times[i + 1] - tol)?;
    Some((k, k + 1, true))
}

/// Two events per faulted trajectory, at fault application and clearing.
pub fn collect_port_events(trajectories: &[Trajectory], scenarios: &[Option<FaultScenario>]) -> Result<Vec<PortEvent>> {
    if trajectories.len() != scenarios.len() {
        return Err(Error::Dimension {
            what: "scenarios per trajectory",
            expected: trajectories.len(),
            got: scenarios.len(),
        });
    }
    let mut events = Vec::new();
    for (t, s) in trajectories.iter().zip(scenarios) {
        let Some(s) = s else { continue };
        let np = n_ports_of(t);
        if np == 0 {
            return Err(Error::MissingChannel("tie1.i.re".into()));
        }
        let i_tie = complex_columns(t, "tie", "i", np)?;
        let v_p = complex_columns(t, "port", "v", np)?;
        for t_s in [s.t_fault, s.t_clear] {
            let (a, b, snapped) = switch_rows(t, t_s)
                .ok_or_else(|| Error::Validation(format!("switching instant {t_s} outside the trajectory")))?;
            if snapped {
                log::warn!("switch at t={t_s} is not on the sample grid; using the step {}..{}", t.times[a], t.times[b]);
            }
            events.push(PortEvent {
                t_event: t_s,
                dv: v_p.iter().map(|c| c[b] - c[a]).collect(),
                di: i_tie.iter().map(|c| c[b] - c[a]).collect(),
                snapped,
            });
        }
    }
    Ok(events)
}

/// Least-squares `D = dI dV^+` over all events.
pub fn estimate_d_matrix(events: &[PortEvent]) -> Result<DMatrix<C64>> {
    let np = events.first().map_or(0, |e| e.dv.len());
    if np == 0 {
        return Err(Error::Validation("no port events".into()));
    }
    if events.iter().any(|e| e.dv.len() != np || e.di.len() != np) {
        return Err(Error::Dimension {
            what: "port event",
            expected: np,
            got: events.iter().map(|e| e.dv.len().min(e.di.len())).min().unwrap_or(0),
        });
    }
    let nf = events.len();
    let dv = DMatrix::from_fn(np, nf, |r, c| events[c].dv[r]);
    let di = DMatrix::from_fn(np, nf, |r, c| events[c].di[r]);
    let (dv_pinv, singular_values, rank) = pinv(&dv);
    if rank < np {
        return Err(Error::RankDeficient {
            rank,
            ports: np,
            singular_values,
        });
    }
    Ok(di * dv_pinv)
}

/// Append `tiecs<k>.i.re/.im = i_tie - D v_p`.
pub fn extract_continuous_component(trajectory: &Trajectory, d_matrix: &DMatrix<C64>) -> Result<Trajectory> {
    let np = d_matrix.nrows();
    if d_matrix.ncols() != np {
        return Err(Error::Validation("port admittance must be square".into()));
    }
    let i_tie = complex_columns(trajectory, "tie", "i", np)?;
    let v_p = complex_columns(trajectory, "port", "v", np)?;
    let mut cols = Vec::with_capacity(2 * np);
    for k in 0..np {
        let cs: Vec<C64> = (0..trajectory.n_rows())
            .map(|r| i_tie[k][r] - (0..np).map(|c| d_matrix[(k, c)] * v_p[c][r]).sum::<C64>())
            .collect();
        cols.push(cs.iter().map(|z| z.re).collect());
        cols.push(cs.iter().map(|z| z.im).collect());
    }
    let mut out = trajectory.clone();
    out.append_channels(complex_names("tiecs", "i", 1..=np), &cols)?;
    Ok(out)
}

struct ExternalNetwork {
    buses: Vec<usize>,
    /// Admittance of the external buses including tie branches to ground.
    y: DMatrix<C64>,
    /// Tie `k` lands on external row `tie_rows[k]` with series admittance `tie_y[k]`.
    tie_rows: Vec<usize>,
    tie_y: Vec<C64>,
}

fn external_network(grid: &GridModel, partition: &Partition) -> Result<(ExternalNetwork, crate::grid::PowerFlowSolution)> {
    let pf = solve_power_flow(grid)?;
    let buses = partition.external_buses.clone();
    let row = |b: usize| buses.iter().position(|&x| x == b);
    let n = buses.len();
    let mut y = DMatrix::zeros(n, n);
    for br in &grid.branches {
        if let (Some(i), Some(j)) = (row(br.from_bus), row(br.to_bus)) {
            let ys = br.admittance();
            y[(i, i)] += ys;
            y[(j, j)] += ys;
            y[(i, j)] -= ys;
            y[(j, i)] -= ys;
        }
    }
    for (k, &b) in buses.iter().enumerate() {
        let bus = grid.bus(b);
        y[(k, k)] += C64::new(0.0, bus.shunt_b);
        if bus.kind == BusKind::Load {
            let v = pf.voltages[b - 1].norm();
            y[(k, k)] += C64::new(bus.load_p, -bus.load_q) / (v * v);
        }
        if let Some(g) = grid.generator_at(b) {
            y[(k, k)] += C64::new(0.0, grid.generators[g].xd_prime).inv();
        }
    }
    let mut tie_rows = Vec::new();
    let mut tie_y = Vec::new();
    for t in &partition.tie_lines {
        let r = row(t.external_bus).ok_or_else(|| Error::Validation(format!("tie end {} is not external", t.external_bus)))?;
        let ys = grid.branches[t.branch].admittance();
        y[(r, r)] += ys;
        tie_rows.push(r);
        tie_y.push(ys);
    }
    Ok((ExternalNetwork { buses, y, tie_rows, tie_y }, pf))
}

impl ExternalNetwork {
    /// `B_t diag(y)`: external injections per unit port voltage.
    fn port_coupling(&self) -> DMatrix<C64> {
        let mut b = DMatrix::zeros(self.buses.len(), self.tie_y.len());
        for (k, (&r, &y)) in self.tie_rows.iter().zip(&self.tie_y).enumerate() {
            b[(r, k)] = y;
        }
        b
    }
}

/// Port admittance of the external system seen from the ports, by Kron
/// reduction of its network with every continuous source held fixed.
pub fn kron_port_admittance(grid: &GridModel, partition: &Partition) -> Result<DMatrix<C64>> {
    let (ext, _) = external_network(grid, partition)?;
    let z = complex_inverse(&ext.y)?;
    let b = ext.port_coupling();
    let y = DMatrix::from_diagonal(&DVector::from_vec(ext.tie_y.clone()));
    Ok(b.transpose() * z * &b - y)
}

/// Exact driving-port equivalent of an external system made only of linear
/// current sources, one per port: `D` from Kron reduction and a linear net
/// with `di_cs/dt = A i_cs + B v_p + c`.
pub fn linear_equivalent(grid: &GridModel, partition: &Partition) -> Result<DpModel> {
    let (ext, pf) = external_network(grid, partition)?;
    let np = partition.n_ports();
    if grid.generators.iter().any(|g| !partition.is_internal(g.bus)) {
        return Err(Error::Validation("external machines have no linear equivalent".into()));
    }
    let sources: Vec<_> = grid.linear_sources.iter().filter(|s| !partition.is_internal(s.bus)).collect();
    if sources.len() != np {
        return Err(Error::Validation(format!("{} external linear sources for {np} ports", sources.len())));
    }
    let z = complex_inverse(&ext.y)?;
    let bt = ext.port_coupling();
    let mut ps = DMatrix::zeros(ext.buses.len(), np);
    for (k, s) in sources.iter().enumerate() {
        let r = ext.buses.iter().position(|&b| b == s.bus).expect("source bus is external");
        ps[(r, k)] = C64::new(1.0, 0.0);
    }
    let ydiag = DMatrix::from_diagonal(&DVector::from_vec(ext.tie_y.clone()));
    let d = bt.transpose() * &z * &bt - ydiag;
    let c = bt.transpose() * &z * &ps;
    let c_inv = complex_inverse(&c)?;
    let k_s = ps.transpose() * &z * &ps;
    let k_v = ps.transpose() * &z * &bt;
    let a = DMatrix::from_diagonal(&DVector::from_iterator(np, sources.iter().map(|s| s.a())));
    let b = DMatrix::from_diagonal(&DVector::from_iterator(np, sources.iter().map(|s| s.b())));
    let a_c = &c * (&a + &b * &k_s) * &c_inv;
    let b_c = &c * &b * &k_v;
    let offset: DVector<C64> = DVector::from_iterator(
        np,
        sources.iter().map(|s| {
            let v0 = pf.voltages[s.bus - 1];
            let s0 = (pf.injections[s.bus - 1] / v0).conj();
            s.a() * s0 + s.b() * v0
        }),
    );
    let c0 = -(&c * offset);

    let n = 2 * np;
    let meta = ModelMeta {
        variant: Variant::Dp,
        partition_hash: partition.fingerprint(),
    };
    let mut net = NeuralEquivalence::new(vec![2 * n, n], Activation::Tanh, false, 0, meta)?;
    let (ra, rb) = (realify(&a_c), realify(&b_c));
    let bias = split(c0.as_slice());
    let mut theta = Vec::with_capacity(2 * n * n + n);
    for r in 0..n {
        theta.extend(ra.row(r).iter());
        theta.extend(rb.row(r).iter());
    }
    theta.extend(bias);
    net.theta = theta;
    net.feature_spec = FeatureSelector::ports(partition).names();
    DpModel::new(d, net, partition)
}

/// Teacher-forced windows of the continuous component driven by measured
/// port voltages. Samples lacking `tiecs` channels are split with `d_matrix`.
pub fn dp_problem(grid: &GridModel, partition: &Partition, dataset: &[Sample], d_matrix: &DMatrix<C64>, cfg: &TrainConfig) -> Result<Problem> {
    let np = partition.n_ports();
    if d_matrix.nrows() != np || d_matrix.ncols() != np {
        return Err(Error::Dimension {
            what: "port admittance",
            expected: np,
            got: d_matrix.nrows(),
        });
    }
    let state = complex_names("tiecs", "i", 1..=np);
    let prepared: Vec<Sample> = dataset
        .iter()
        .map(|s| {
            if let Some(f) = &s.scenario {
                if !partition.is_internal(f.fault_bus) {
                    return Err(Error::FaultOutsideModeledRegion(f.fault_bus));
                }
            }
            let trajectory = if s.trajectory.has_channel(&state[0]) {
                s.trajectory.clone()
            } else {
                extract_continuous_component(&s.trajectory, d_matrix)?
            };
            Ok(Sample {
                trajectory,
                scenario: s.scenario.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let selector = cfg.selector(grid, partition)?;
    Problem::teacher(&prepared, &state, &selector, cfg)
}

/// Teacher-forced training of the continuous component on measured port
/// voltages; `rnn` selects the recurrent cell.
pub fn train_dp_neudye(
    grid: &GridModel,
    partition: &Partition,
    dataset: &[Sample],
    d_matrix: &DMatrix<C64>,
    cfg: &TrainConfig,
    rnn: bool,
) -> Result<TrainReport> {
    cfg.validate()?;
    let variant = if rnn { Variant::DpRnn } else { Variant::Dp };
    let cfg = TrainConfig { variant, ..cfg.clone() };
    let problem = dp_problem(grid, partition, dataset, d_matrix, &cfg)?;
    let meta = ModelMeta {
        variant,
        partition_hash: partition.fingerprint(),
    };
    let mut model = initial_model(&problem, 2 * partition.n_ports(), &cfg, meta)?;
    train_windows(&mut model, &problem, &cfg, LossVariant::ExOnly)
}
