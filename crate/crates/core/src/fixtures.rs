//! Desk-scale test systems.
//!
//! * `two-area-4m`: two areas of two classical machines each, joined by two
//!   tie lines; area 1 (buses 1-8) is the internal system. The slack machine
//!   is a stiff grid equivalent, so faults do not leave a lasting angle drift.
//! * `nine-bus-3m`: the WSCC 9-bus, 3-machine network (line charging lumped
//!   into bus shunts) redispatched for a light export, cut so that machines 2
//!   and 3 are internal.
//! * `linear-port-synth`: a two-machine internal system whose external side
//!   is a passive network driven by two linear current sources, so the port
//!   relation and its dynamics are exactly linear.

use std::collections::BTreeSet;

use crate::grid::{Branch, Bus, BusKind, Generator, GridModel, LinearSource};

pub const FIXTURE_NAMES: [&str; 3] = ["two-area-4m", "nine-bus-3m", "linear-port-synth"];

/// Look a fixture up by its CLI name.
pub fn by_name(name: &str) -> Option<(GridModel, BTreeSet<usize>)> {
    match name {
        "two-area-4m" => Some(two_area_4m()),
        "nine-bus-3m" => Some(nine_bus_3m()),
        "linear-port-synth" => Some(linear_port_synth()),
        _ => None,
    }
}

fn bus(id: usize, kind: BusKind, v_set: f64, p: f64, q: f64, b: f64) -> Bus {
    Bus {
        id,
        kind,
        voltage_setpoint: v_set,
        load_p: p,
        load_q: q,
        shunt_b: b,
    }
}

fn line(from: usize, to: usize, r: f64, x: f64) -> Branch {
    Branch {
        from_bus: from,
        to_bus: to,
        r,
        x,
    }
}

fn machine(bus: usize, m: f64, d: f64, xd: f64) -> Generator {
    Generator {
        bus,
        inertia_m: m,
        damping: d,
        xd_prime: xd,
    }
}

pub fn two_area_4m() -> (GridModel, BTreeSet<usize>) {
    use BusKind::*;
    let buses = vec![
        bus(1, Generator, 1.0, -6.0, 0.0, 0.0),
        bus(2, Generator, 1.0, -5.5, 0.0, 0.0),
        bus(3, Load, 1.0, 4.0, 1.0, 0.5),
        bus(4, Load, 1.0, 4.0, 1.0, 0.5),
        bus(5, Load, 1.0, 0.0, 0.0, 0.0),
        bus(6, Load, 1.0, 0.0, 0.0, 0.0),
        bus(7, Load, 1.0, 1.6, 0.1, 0.2),
        bus(8, Load, 1.0, 1.6, 0.1, 0.2),
        bus(9, Slack, 1.06, 0.0, 0.0, 0.0),
        bus(10, Generator, 1.05, -5.0, 0.0, 0.0),
        bus(11, Load, 1.0, 4.0, 1.0, 0.5),
        bus(12, Load, 1.0, 4.0, 1.0, 0.5),
        bus(13, Load, 1.0, 2.0, 0.5, 0.0),
        bus(14, Load, 1.0, 2.0, 0.5, 0.0),
    ];
    let branches = vec![
        line(1, 5, 0.0, 0.02),
        line(2, 6, 0.0, 0.02),
        line(5, 6, 0.002, 0.03),
        line(5, 3, 0.002, 0.025),
        line(6, 4, 0.002, 0.025),
        line(3, 4, 0.004, 0.05),
        line(3, 7, 0.003, 0.03),
        line(4, 8, 0.003, 0.03),
        line(7, 8, 0.006, 0.06),
        // tie lines
        line(7, 11, 0.008, 0.08),
        line(8, 12, 0.008, 0.08),
        // external area
        line(9, 13, 0.0, 0.02),
        line(10, 14, 0.0, 0.02),
        line(13, 14, 0.002, 0.03),
        line(13, 11, 0.002, 0.025),
        line(14, 12, 0.002, 0.025),
        line(11, 12, 0.004, 0.05),
    ];
    let generators = vec![
        machine(1, 80.0, 60.0, 0.04),
        machine(2, 75.0, 56.0, 0.04),
        // stiff grid equivalent: holds the angle reference after faults
        machine(9, 1.0e4, 1.0e5, 0.035),
        machine(10, 150.0, 110.0, 0.035),
    ];
    let grid = GridModel {
        f_base: 60.0,
        buses,
        branches,
        generators,
        linear_sources: vec![],
    };
    (grid, (1..=8).collect())
}

pub fn nine_bus_3m() -> (GridModel, BTreeSet<usize>) {
    use BusKind::*;
    // line charging B/2 summed per bus
    let buses = vec![
        bus(1, Slack, 1.06, 0.0, 0.0, 0.0),
        bus(2, Generator, 0.98, -0.8, 0.0, 0.0),
        bus(3, Generator, 0.98, -0.3, 0.0, 0.0),
        bus(4, Load, 1.0, 0.0, 0.0, 0.088 + 0.079),
        bus(5, Load, 1.0, 1.25, 0.5, 0.088 + 0.153),
        bus(6, Load, 1.0, 0.9, 0.3, 0.179 + 0.079),
        bus(7, Load, 1.0, 0.0, 0.0, 0.153 + 0.0745),
        bus(8, Load, 1.0, 1.0, 0.35, 0.0745 + 0.1045),
        bus(9, Load, 1.0, 0.0, 0.0, 0.1045 + 0.179),
    ];
    let branches = vec![
        line(1, 4, 0.0, 0.0576),
        line(4, 5, 0.01, 0.085),
        line(5, 7, 0.032, 0.161),
        line(7, 8, 0.0085, 0.072),
        line(8, 9, 0.0119, 0.1008),
        line(9, 6, 0.039, 0.17),
        line(6, 4, 0.017, 0.092),
        line(2, 7, 0.0, 0.0625),
        line(3, 9, 0.0, 0.0586),
    ];
    let generators = vec![
        machine(1, 47.28, 47.28, 0.0608),
        machine(2, 12.8, 12.8, 0.1198),
        machine(3, 6.02, 6.02, 0.1813),
    ];
    let grid = GridModel {
        f_base: 60.0,
        buses,
        branches,
        generators,
        linear_sources: vec![],
    };
    (grid, BTreeSet::from([2, 3, 7, 8, 9]))
}

pub fn linear_port_synth() -> (GridModel, BTreeSet<usize>) {
    use BusKind::*;
    let buses = vec![
        bus(1, Generator, 1.02, -2.0, 0.0, 0.0),
        bus(2, Generator, 1.01, -1.5, 0.0, 0.0),
        bus(3, Load, 1.0, 2.0, 0.5, 0.1),
        bus(4, Load, 1.0, 1.5, 0.4, 0.1),
        bus(5, Slack, 1.0, 0.0, 0.0, 0.0),
        bus(6, Generator, 1.0, -0.5, 0.0, 0.0),
        bus(7, Load, 1.0, 0.5, 0.1, 0.0),
    ];
    let branches = vec![
        line(1, 3, 0.0, 0.05),
        line(2, 4, 0.0, 0.05),
        line(3, 4, 0.005, 0.08),
        line(3, 5, 0.01, 0.1),
        line(4, 6, 0.01, 0.1),
        line(5, 6, 0.01, 0.1),
        line(5, 7, 0.005, 0.05),
        line(6, 7, 0.005, 0.05),
    ];
    let generators = vec![machine(1, 30.0, 30.0, 0.08), machine(2, 25.0, 25.0, 0.08)];
    let linear_sources = vec![
        LinearSource {
            bus: 5,
            a: [-1.5, 2.5],
            b: [0.8, 0.3],
        },
        LinearSource {
            bus: 6,
            a: [-2.0, -1.8],
            b: [0.6, -0.4],
        },
    ];
    let grid = GridModel {
        f_base: 60.0,
        buses,
        branches,
        generators,
        linear_sources,
    };
    (grid, BTreeSet::from([1, 2, 3, 4]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_partition, solve_power_flow};

    #[test]
    fn fixtures_validate_and_converge() {
        for name in FIXTURE_NAMES {
            let (grid, internal) = by_name(name).unwrap();
            grid.validate().unwrap();
            let pf = solve_power_flow(&grid).unwrap();
            assert!(pf.mismatch < 1e-8, "{name}");
            for v in &pf.voltages {
                assert!(v.norm() > 0.85 && v.norm() < 1.15, "{name}: {v}");
            }
            let p = make_partition(&grid, &internal).unwrap();
            assert_eq!(p.n_ports(), 2, "{name}");
        }
        assert!(by_name("nope").is_none());
    }
}
