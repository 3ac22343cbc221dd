//! Classical-machine swing dynamics over a modeled bus region, the linear
//! network solve, and the Jacobians of the right-hand side after the network
//! voltages have been eliminated.
//!
//! Machine states are interleaved `[delta_0, omega_0, delta_1, omega_1, ...]`.
//! Explicit states (tie injections, neural or linear-source states) are
//! interleaved complex injections `[re_0, im_0, ...]` at "sites", i.e. local
//! bus indices of the region.

use nalgebra::DMatrix;

use crate::grid::{BusKind, FaultScenario, GridModel, Partition, PowerFlowSolution};
use crate::linalg::complex_inverse;
use crate::{Error, Result, C64};

/// Equilibrium quantities of one machine.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MachineInit {
    pub delta: f64,
    pub emf: f64,
    pub p_mech: f64,
}

/// Solve `E' = V_t + j x'd I_gen` for every generator of the power flow.
pub fn init_states(grid: &GridModel, pf: &PowerFlowSolution) -> Result<Vec<MachineInit>> {
    grid.generators
        .iter()
        .zip(&pf.generator_power)
        .map(|(g, s)| {
            let v = pf.voltages[g.bus - 1];
            if v.norm() < 1e-9 {
                return Err(Error::Validation(format!("generator bus {} has zero voltage", g.bus)));
            }
            let i = (s / v).conj();
            let e = v + C64::new(0.0, g.xd_prime) * i;
            Ok(MachineInit {
                delta: e.arg(),
                emf: e.norm(),
                p_mech: s.re,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Machine {
    /// Position in `GridModel::generators`.
    pub gen_index: usize,
    pub bus: usize,
    /// Index of the machine bus within its region.
    pub local: usize,
    pub inertia_m: f64,
    pub damping: f64,
    pub xd_prime: f64,
    pub emf: f64,
    pub p_mech: f64,
}

impl Machine {
    fn emf_phasor(&self, delta: f64) -> C64 {
        C64::from_polar(self.emf, delta)
    }

    /// Norton current `E'/(j x'd)`.
    pub fn norton_current(&self, delta: f64) -> C64 {
        self.emf_phasor(delta) / C64::new(0.0, self.xd_prime)
    }

    /// Electrical power `Re{E' conj((E' - V)/(j x'd))}`.
    pub fn electrical_power(&self, delta: f64, v: C64) -> f64 {
        let e = self.emf_phasor(delta);
        (e * ((e - v) / C64::new(0.0, self.xd_prime)).conj()).re
    }
}

/// A set of modeled buses with their constant admittance (branches inside the
/// set, shunts, constant-impedance loads and machine Norton admittances).
#[derive(Clone, Debug)]
pub struct Region {
    pub bus_ids: Vec<usize>,
    local: Vec<Option<usize>>,
    pub y_aug: DMatrix<C64>,
    pub machines: Vec<Machine>,
    pub omega_s: f64,
    /// Equilibrium voltages of the modeled buses.
    pub v0: Vec<C64>,
}

impl Region {
    /// Every bus of the grid.
    pub fn full(grid: &GridModel, pf: &PowerFlowSolution) -> Result<Self> {
        Self::build(grid, pf, &(1..=grid.n_bus()).collect::<Vec<_>>())
    }

    /// Internal buses only; tie-line branches are left out, their currents
    /// enter as injections at the port buses.
    pub fn internal(grid: &GridModel, partition: &Partition, pf: &PowerFlowSolution) -> Result<Self> {
        Self::build(grid, pf, &partition.internal_buses)
    }

    fn build(grid: &GridModel, pf: &PowerFlowSolution, buses: &[usize]) -> Result<Self> {
        let inits = init_states(grid, pf)?;
        let mut local = vec![None; grid.n_bus()];
        for (k, &b) in buses.iter().enumerate() {
            local[b - 1] = Some(k);
        }
        let n = buses.len();
        let mut y = DMatrix::zeros(n, n);
        // branches with both ends inside
        for br in &grid.branches {
            if let (Some(i), Some(j)) = (local[br.from_bus - 1], local[br.to_bus - 1]) {
                let ys = br.admittance();
                y[(i, i)] += ys;
                y[(j, j)] += ys;
                y[(i, j)] -= ys;
                y[(j, i)] -= ys;
            }
        }
        let mut machines = Vec::new();
        for (k, &b) in buses.iter().enumerate() {
            let bus = grid.bus(b);
            y[(k, k)] += C64::new(0.0, bus.shunt_b);
            if bus.kind == BusKind::Load {
                let v = pf.voltages[b - 1].norm();
                y[(k, k)] += C64::new(bus.load_p, -bus.load_q) / (v * v);
            }
            if let Some(gi) = grid.generator_at(b) {
                let g = &grid.generators[gi];
                y[(k, k)] += C64::new(0.0, g.xd_prime).inv();
                machines.push(Machine {
                    gen_index: gi,
                    bus: b,
                    local: k,
                    inertia_m: g.inertia_m,
                    damping: g.damping,
                    xd_prime: g.xd_prime,
                    emf: inits[gi].emf,
                    p_mech: inits[gi].p_mech,
                });
            }
        }
        machines.sort_by_key(|m| m.gen_index);
        Ok(Self {
            bus_ids: buses.to_vec(),
            local,
            y_aug: y,
            machines,
            omega_s: grid.omega_s(),
            v0: buses.iter().map(|&b| pf.voltages[b - 1]).collect(),
        })
    }

    pub fn n_bus(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn n_state(&self) -> usize {
        2 * self.machines.len()
    }

    pub fn local(&self, bus: usize) -> Option<usize> {
        self.local.get(bus.wrapping_sub(1)).copied().flatten()
    }

    /// Equilibrium machine state vector.
    pub fn equilibrium(&self, grid: &GridModel, pf: &PowerFlowSolution) -> Result<Vec<f64>> {
        let inits = init_states(grid, pf)?;
        Ok(self
            .machines
            .iter()
            .flat_map(|m| [inits[m.gen_index].delta, 0.0])
            .collect())
    }

    /// Region admittance with an optional fault and an extra dense block.
    pub fn admittance(&self, fault: Option<&FaultScenario>, extra: Option<&DMatrix<C64>>) -> Result<DMatrix<C64>> {
        let mut y = self.y_aug.clone();
        if let Some(f) = fault {
            let k = self.local(f.fault_bus).ok_or(Error::FaultOutsideModeledRegion(f.fault_bus))?;
            y[(k, k)] += C64::new(f.fault_admittance, 0.0);
        }
        if let Some(e) = extra {
            y += e;
        }
        Ok(y)
    }
}

/// Machine right-hand side for given bus voltages of the region.
pub fn rhs_internal(region: &Region, x: &[f64], v: &[C64]) -> Result<Vec<f64>> {
    if x.len() != region.n_state() {
        return Err(Error::Dimension {
            what: "machine state",
            expected: region.n_state(),
            got: x.len(),
        });
    }
    if v.len() != region.n_bus() {
        return Err(Error::Dimension {
            what: "bus voltages",
            expected: region.n_bus(),
            got: v.len(),
        });
    }
    let mut dx = vec![0.0; x.len()];
    rhs_into(region, x, v, &mut dx);
    Ok(dx)
}

pub(crate) fn rhs_into(region: &Region, x: &[f64], v: &[C64], dx: &mut [f64]) {
    for (k, m) in region.machines.iter().enumerate() {
        let (delta, omega) = (x[2 * k], x[2 * k + 1]);
        let pe = m.electrical_power(delta, v[m.local]);
        dx[2 * k] = region.omega_s * omega;
        dx[2 * k + 1] = (m.p_mech - pe - m.damping * omega) / m.inertia_m;
    }
}

/// Dense inverse of a region admittance: the factorization reused for every
/// network solve of one fault window.
#[derive(Clone, Debug)]
pub struct NetworkSolver {
    pub zbus: DMatrix<C64>,
    pub ybus: DMatrix<C64>,
}

impl NetworkSolver {
    pub fn new(ybus: DMatrix<C64>) -> Result<Self> {
        Ok(Self {
            zbus: complex_inverse(&ybus)?,
            ybus,
        })
    }

    /// `V = Y^-1 I` for a sparse list of injections.
    pub fn solve_sparse(&self, injections: impl IntoIterator<Item = (usize, C64)>) -> Vec<C64> {
        let n = self.zbus.nrows();
        let mut v = vec![C64::new(0.0, 0.0); n];
        for (b, i) in injections {
            if i == C64::new(0.0, 0.0) {
                continue;
            }
            let col = self.zbus.column(b);
            for r in 0..n {
                v[r] += col[r] * i;
            }
        }
        v
    }
}

/// Solve the region network for machine state `x` plus optional current
/// injections `(local bus, current)` (tie currents oriented into the region).
pub fn solve_network(
    region: &Region,
    solver: &NetworkSolver,
    x: &[f64],
    tie_injections: Option<&[(usize, C64)]>,
) -> Result<Vec<C64>> {
    if x.len() != region.n_state() {
        return Err(Error::Dimension {
            what: "machine state",
            expected: region.n_state(),
            got: x.len(),
        });
    }
    let mach = region
        .machines
        .iter()
        .enumerate()
        .map(|(k, m)| (m.local, m.norton_current(x[2 * k])));
    let ties = tie_injections.unwrap_or(&[]).iter().copied();
    Ok(solver.solve_sparse(mach.chain(ties)))
}

/// Features as an affine-free linear map of machine states, explicit states
/// and interleaved bus voltages: `z = fx x + fe e + fv vr`.
#[derive(Clone, Debug)]
pub struct LinearFeatureMap {
    pub fx: DMatrix<f64>,
    pub fe: DMatrix<f64>,
    pub fv: DMatrix<f64>,
}

impl LinearFeatureMap {
    pub fn dim(&self) -> usize {
        self.fx.nrows()
    }

    pub fn eval(&self, x: &[f64], e: &[f64], v: &[C64]) -> Vec<f64> {
        let mut z = vec![0.0; self.dim()];
        for r in 0..self.dim() {
            let mut s = 0.0;
            for (c, xv) in x.iter().enumerate() {
                s += self.fx[(r, c)] * xv;
            }
            for (c, ev) in e.iter().enumerate() {
                s += self.fe[(r, c)] * ev;
            }
            for (c, vv) in v.iter().enumerate() {
                s += self.fv[(r, 2 * c)] * vv.re + self.fv[(r, 2 * c + 1)] * vv.im;
            }
            z[r] = s;
        }
        z
    }
}

/// The region with voltages eliminated: a closed ODE right-hand side in the
/// machine states `x` and the explicit injection states `e`.
pub struct Eliminated<'a> {
    pub region: &'a Region,
    pub solver: &'a NetworkSolver,
    /// Local bus index receiving each explicit injection.
    pub sites: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct EliminatedJacobians {
    pub dp_dx: DMatrix<f64>,
    pub dp_dex: DMatrix<f64>,
    pub dz_dx: DMatrix<f64>,
    pub dz_dex: DMatrix<f64>,
}

impl<'a> Eliminated<'a> {
    pub fn voltages(&self, x: &[f64], e: &[f64]) -> Vec<C64> {
        let mach = self
            .region
            .machines
            .iter()
            .enumerate()
            .map(|(k, m)| (m.local, m.norton_current(x[2 * k])));
        let sites = self
            .sites
            .iter()
            .enumerate()
            .map(|(k, &b)| (b, C64::new(e[2 * k], e[2 * k + 1])));
        self.solver.solve_sparse(mach.chain(sites))
    }

    pub fn rhs(&self, x: &[f64], e: &[f64]) -> Vec<f64> {
        let v = self.voltages(x, e);
        let mut dx = vec![0.0; x.len()];
        rhs_into(self.region, x, &v, &mut dx);
        dx
    }

    /// Interleaved voltage sensitivities `(dvr/dx, dvr/de)`; by the
    /// implicit-function theorem on `Y V - I(x, e) = 0`, `dV = Y^-1 dI`.
    pub fn voltage_jacobians(&self, x: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.region.n_bus();
        let z = &self.solver.zbus;
        let mut dvdx = DMatrix::zeros(2 * n, x.len());
        for (k, m) in self.region.machines.iter().enumerate() {
            // dI/d(delta) = E'/x'd
            let di = C64::from_polar(m.emf, x[2 * k]) / m.xd_prime;
            for r in 0..n {
                let dv = z[(r, m.local)] * di;
                dvdx[(2 * r, 2 * k)] = dv.re;
                dvdx[(2 * r + 1, 2 * k)] = dv.im;
            }
        }
        let mut dvde = DMatrix::zeros(2 * n, 2 * self.sites.len());
        for (k, &b) in self.sites.iter().enumerate() {
            for r in 0..n {
                let zc = z[(r, b)];
                dvde[(2 * r, 2 * k)] = zc.re;
                dvde[(2 * r + 1, 2 * k)] = zc.im;
                let jz = zc * C64::i();
                dvde[(2 * r, 2 * k + 1)] = jz.re;
                dvde[(2 * r + 1, 2 * k + 1)] = jz.im;
            }
        }
        (dvdx, dvde)
    }

    /// Jacobians of the eliminated right-hand side and of the features.
    pub fn jacobians(&self, x: &[f64], e: &[f64], features: &LinearFeatureMap) -> EliminatedJacobians {
        let v = self.voltages(x, e);
        let (dvdx, dvde) = self.voltage_jacobians(x);
        let ns = x.len();
        let ne = e.len();
        let mut dp_dx = DMatrix::zeros(ns, ns);
        let mut dp_dex = DMatrix::zeros(ns, ne);
        for (k, m) in self.region.machines.iter().enumerate() {
            let ep = C64::from_polar(m.emf, x[2 * k]);
            let vb = v[m.local];
            // pe = Im(E' conj V)/x'
            let dpe_ddelta_own = (ep * vb.conj()).re / m.xd_prime;
            let dpe_dvre = ep.im / m.xd_prime;
            let dpe_dvim = -ep.re / m.xd_prime;
            let b = m.local;
            dp_dx[(2 * k, 2 * k + 1)] = self.region.omega_s;
            for c in 0..ns {
                let mut d = dpe_dvre * dvdx[(2 * b, c)] + dpe_dvim * dvdx[(2 * b + 1, c)];
                if c == 2 * k {
                    d += dpe_ddelta_own;
                }
                dp_dx[(2 * k + 1, c)] = -d / m.inertia_m;
            }
            dp_dx[(2 * k + 1, 2 * k + 1)] -= m.damping / m.inertia_m;
            for c in 0..ne {
                let d = dpe_dvre * dvde[(2 * b, c)] + dpe_dvim * dvde[(2 * b + 1, c)];
                dp_dex[(2 * k + 1, c)] = -d / m.inertia_m;
            }
        }
        let dz_dx = &features.fx + &features.fv * &dvdx;
        let dz_dex = &features.fe + &features.fv * &dvde;
        EliminatedJacobians {
            dp_dx,
            dp_dex,
            dz_dx,
            dz_dex,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::grid::solve_power_flow;

    #[test]
    fn zero_current_machine_emf_equals_terminal_voltage() {
        let mut grid = fixtures::nine_bus_3m().0;
        // no load, no charging, flat setpoints: nothing flows
        for b in &mut grid.buses {
            b.load_p = 0.0;
            b.load_q = 0.0;
            b.shunt_b = 0.0;
            b.voltage_setpoint = 1.04;
        }
        let pf = solve_power_flow(&grid).unwrap();
        let init = init_states(&grid, &pf).unwrap();
        let v = pf.voltages[grid.generators[0].bus - 1];
        assert!((init[0].emf - v.norm()).abs() < 1e-9);
        assert!((init[0].delta - v.arg()).abs() < 1e-9);
    }

    #[test]
    fn equilibrium_has_zero_derivative_and_matches_power_flow() {
        for (grid, _) in [fixtures::nine_bus_3m(), fixtures::two_area_4m()] {
            let pf = solve_power_flow(&grid).unwrap();
            let region = Region::full(&grid, &pf).unwrap();
            let x0 = region.equilibrium(&grid, &pf).unwrap();
            let solver = NetworkSolver::new(region.admittance(None, None).unwrap()).unwrap();
            let v = solve_network(&region, &solver, &x0, None).unwrap();
            for (a, b) in v.iter().zip(&pf.voltages) {
                assert!((a - b).norm() < 1e-8);
            }
            let dx = rhs_internal(&region, &x0, &v).unwrap();
            assert!(dx.iter().all(|d| d.abs() < 1e-10), "{dx:?}");
        }
    }

    #[test]
    fn damping_only_derivative() {
        let (grid, _) = fixtures::nine_bus_3m();
        let pf = solve_power_flow(&grid).unwrap();
        let region = Region::full(&grid, &pf).unwrap();
        let mut x0 = region.equilibrium(&grid, &pf).unwrap();
        let solver = NetworkSolver::new(region.admittance(None, None).unwrap()).unwrap();
        let v = solve_network(&region, &solver, &x0, None).unwrap();
        x0[1] = 0.01;
        let dx = rhs_internal(&region, &x0, &v).unwrap();
        let m = &region.machines[0];
        assert!((dx[1] + m.damping * 0.01 / m.inertia_m).abs() < 1e-12);
        assert!((dx[0] - region.omega_s * 0.01).abs() < 1e-12);
    }

    #[test]
    fn smib_electrical_power_by_hand() {
        let m = Machine {
            gen_index: 0,
            bus: 1,
            local: 0,
            inertia_m: 1.0,
            damping: 0.0,
            xd_prime: 0.3,
            emf: 1.1,
            p_mech: 0.0,
        };
        // P = E V sin(delta - theta) / x'
        let (delta, v) = (0.7, C64::from_polar(0.98, 0.1));
        let want = 1.1 * 0.98 * (0.7f64 - 0.1).sin() / 0.3;
        assert!((m.electrical_power(delta, v) - want).abs() < 1e-14);
    }

    #[test]
    fn two_bus_ohms_law() {
        // no machines: Y = [[-j10 + 1, j10], [j10, -j10 + 1]] with unit conductance shunts
        let y = DMatrix::from_row_slice(2, 2, &[
            C64::new(1.0, -10.0),
            C64::new(0.0, 10.0),
            C64::new(0.0, 10.0),
            C64::new(1.0, -10.0),
        ]);
        let s = NetworkSolver::new(y.clone()).unwrap();
        let i = C64::new(0.5, -0.2);
        let v = s.solve_sparse([(0, i)]);
        // hand solve via Cramer's rule
        let det = y[(0, 0)] * y[(1, 1)] - y[(0, 1)] * y[(1, 0)];
        assert!((v[0] - i * y[(1, 1)] / det).norm() < 1e-14);
        assert!((v[1] + i * y[(1, 0)] / det).norm() < 1e-14);
        let zero = s.solve_sparse(std::iter::empty());
        assert!(zero.iter().all(|z| z.norm() == 0.0));
    }
}
