use std::collections::BTreeSet;

use super::*;
use crate::fixtures;
use crate::grid::make_partition;
use crate::neuralnet::{Activation, ModelMeta, Variant};

fn two_area() -> (GridModel, Partition) {
    let (g, internal) = fixtures::two_area_4m();
    let p = make_partition(&g, &internal).unwrap();
    (g, p)
}

fn zero_net(partition: &Partition, selector: &FeatureSelector) -> NeuralEquivalence {
    let np = 2 * partition.n_ports();
    let mut m = NeuralEquivalence::new(
        vec![np + selector.dim(), 8, np],
        Activation::Tanh,
        false,
        1,
        ModelMeta {
            variant: Variant::Pi,
            partition_hash: partition.fingerprint(),
        },
    )
    .unwrap();
    m.theta.iter_mut().for_each(|t| *t = 0.0);
    m.feature_spec = selector.names();
    m
}

fn max_drift(t: &Trajectory) -> f64 {
    let first = t.row(0).to_vec();
    (0..t.n_rows())
        .flat_map(|r| t.row(r).iter().zip(&first).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

#[test]
fn trapezoid_first_step_on_decay() {
    let (x1, _) = trapezoid_step(0.1, &[1.0], &[-1.0], |x| vec![-x[0]], 1e-15, 100).unwrap();
    assert!((x1[0] - 0.95 / 1.05).abs() < 1e-14);
    assert!((x1[0] - 0.9047619).abs() < 1e-7);
}

#[test]
fn trapezoid_is_second_order() {
    let err = |h: f64| {
        let n = (1.0 / h).round() as usize;
        let mut x = vec![1.0];
        for _ in 0..n {
            let f0 = vec![-x[0]];
            x = trapezoid_step(h, &x, &f0, |x| vec![-x[0]], 1e-15, 200).unwrap().0;
        }
        (x[0] - (-1.0f64).exp()).abs()
    };
    for h in [0.1, 0.05, 0.025] {
        let ratio = err(h) / err(h / 2.0);
        assert!((3.5..=4.5).contains(&ratio), "h={h}: {ratio}");
    }
}

#[test]
fn schedule_duplicates_switch_instants() {
    let s = FaultScenario::new(2, 0.5, 0.5625);
    let nodes = schedule(0.0, 0.1, 1.0, Some(&s));
    let times: Vec<f64> = nodes.iter().map(|n| n.t).collect();
    let segs: Vec<usize> = nodes.iter().map(|n| n.segment).collect();
    // 11 grid nodes, a duplicate at 0.5 and an inserted pair at 0.5625
    assert_eq!(nodes.len(), 14);
    let k = times.iter().position(|&t| (t - 0.5).abs() < 1e-12).unwrap();
    assert_eq!((segs[k], segs[k + 1]), (0, 1));
    assert_eq!(times[k + 2], 0.5625);
    assert_eq!((segs[k + 2], segs[k + 3], segs[k + 4]), (1, 2, 2));
    assert_eq!(segments_for_times(&times, Some(&s)), nodes);
    assert!(schedule(0.0, 0.1, 1.0, None).iter().all(|n| n.segment == 0));
}

#[test]
fn full_run_holds_equilibrium() {
    let cfg = SimConfig {
        t_end: 10.0,
        ..SimConfig::default()
    };
    for name in fixtures::FIXTURE_NAMES {
        let (g, internal) = fixtures::by_name(name).unwrap();
        let p = make_partition(&g, &internal).unwrap();
        let t = simulate_full(&g, None, &cfg, Some(&p)).unwrap();
        assert_eq!(t.n_rows(), 2001);
        assert!(!t.diverged);
        let d = max_drift(&t);
        assert!(d < 1e-8, "{name}: drift {d}");
    }
}

#[test]
fn full_run_channels() {
    let (g, p) = two_area();
    let cfg = SimConfig {
        t_end: 0.05,
        ..SimConfig::default()
    };
    let t = simulate_full(&g, None, &cfg, Some(&p)).unwrap();
    assert_eq!(t.n_channels(), 2 * 4 + 2 * 14 + 4 + 4);
    for c in ["gen1.delta", "gen4.omega", "bus14.v.im", "tie2.i.re", "port1.v.im"] {
        assert!(t.has_channel(c), "{c}");
    }
    let plain = simulate_full(&g, None, &cfg, None).unwrap();
    assert!(!plain.has_channel("tie1.i.re"));
}

#[test]
fn fault_swings_then_decays() {
    let (g, p) = two_area();
    let s = FaultScenario::new(3, 0.5, 0.57);
    let cfg = SimConfig {
        t_end: 8.0,
        ..SimConfig::default()
    };
    let t = simulate_full(&g, Some(&s), &cfg, Some(&p)).unwrap();
    assert!(!t.diverged);
    let pf = solve_power_flow(&g).unwrap();
    let region = Region::full(&g, &pf).unwrap();
    // kinetic energy of the speed deviations
    let energy = |r: usize| -> f64 {
        region
            .machines
            .iter()
            .enumerate()
            .map(|(k, m)| 0.5 * m.inertia_m * t.row(r)[2 * k + 1].powi(2))
            .sum()
    };
    let post = t.rows_in(0.57, 8.0);
    let peak = post.iter().map(|&r| energy(r)).fold(0.0, f64::max);
    let tail = t.rows_in(7.0, 8.0).iter().map(|&r| energy(r)).fold(0.0, f64::max);
    assert!(peak > 1e-8);
    assert!(tail < 0.05 * peak, "tail {tail} peak {peak}");
    // the fault-side machine accelerates during the fault
    let w1 = t.column("gen1.omega").unwrap();
    let r = t.rows_in(0.56, 0.565)[0];
    assert!(w1[r] > 0.0);
    // voltages jump at application, machine states do not
    let k = (0..t.n_rows()).find(|&i| t.is_pre_switch(i)).unwrap();
    assert_eq!(t.value(k, 0), t.value(k + 1, 0));
    let v = t.channel_index("bus3.v.re").unwrap();
    assert!((t.value(k, v) - t.value(k + 1, v)).abs() > 0.1);
}

#[test]
fn runs_are_bit_identical() {
    let (g, p) = two_area();
    let s = FaultScenario::new(4, 0.2, 0.27);
    let cfg = SimConfig {
        t_end: 1.0,
        ..SimConfig::default()
    };
    let a = simulate_full(&g, Some(&s), &cfg, Some(&p)).unwrap();
    let b = simulate_full(&g, Some(&s), &cfg, Some(&p)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_net_pi_hybrid_holds_equilibrium() {
    let (g, p) = two_area();
    let sel = FeatureSelector::rich(&g, &p);
    let m = zero_net(&p, &sel);
    let cfg = SimConfig {
        t_end: 10.0,
        ..SimConfig::default()
    };
    let t = simulate_hybrid_pi(&g, &p, &m, None, &cfg).unwrap();
    assert!(max_drift(&t) < 1e-8, "{}", max_drift(&t));
}

#[test]
fn hybrid_schema_extends_internal_full_channels() {
    let (g, p) = two_area();
    let sel = FeatureSelector::ports(&p);
    let m = zero_net(&p, &sel);
    let cfg = SimConfig {
        t_end: 0.05,
        ..SimConfig::default()
    };
    let hy = simulate_hybrid_pi(&g, &p, &m, None, &cfg).unwrap();
    let full = simulate_full(&g, None, &cfg, Some(&p)).unwrap();
    let internal: BTreeSet<String> = full
        .channels
        .iter()
        .filter(|c| {
            let id = |pre: &str| c.strip_prefix(pre).and_then(|r| r.split('.').next()?.parse::<usize>().ok());
            if let Some(k) = id("gen") {
                p.is_internal(g.generators[k - 1].bus)
            } else if let Some(b) = id("bus") {
                p.is_internal(b)
            } else {
                true
            }
        })
        .cloned()
        .collect();
    let hybrid: BTreeSet<String> = hy.channels.iter().cloned().collect();
    assert!(internal.is_subset(&hybrid));
    assert_eq!(hy.channels.len(), internal.len());
}

#[test]
fn hybrid_rejects_external_fault() {
    let (g, p) = two_area();
    let sel = FeatureSelector::ports(&p);
    let m = zero_net(&p, &sel);
    let s = FaultScenario::new(12, 0.1, 0.2);
    let err = simulate_hybrid_pi(&g, &p, &m, Some(&s), &SimConfig::default()).unwrap_err();
    assert!(matches!(err, Error::FaultOutsideModeledRegion(12)));
    assert!(err.to_string().contains("fault outside modeled region"));
}

/// Replays recorded tie currents: slopes from the full run, reset to the
/// recorded post-switch value at switching instants.
struct Replay {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    /// Set between a reset and the next instant.
    post_switch: std::cell::Cell<Option<f64>>,
}

impl Replay {
    fn new(t: &Trajectory, np: usize) -> Self {
        let cols: Vec<usize> = complex_names("tie", "i", 1..=np)
            .iter()
            .map(|c| t.channel_index(c).unwrap())
            .collect();
        Self {
            times: t.times.clone(),
            values: (0..t.n_rows())
                .map(|r| cols.iter().map(|&c| t.value(r, c)).collect())
                .collect(),
            post_switch: std::cell::Cell::new(None),
        }
    }

    fn slope(&self, i: usize) -> Option<Vec<f64>> {
        let h = self.times[i + 1] - self.times[i];
        (h > 0.0).then(|| {
            self.values[i + 1]
                .iter()
                .zip(&self.values[i])
                .map(|(a, b)| (a - b) / h)
                .collect()
        })
    }
}

impl ExplicitDynamics for Replay {
    fn dim(&self) -> usize {
        self.values[0].len()
    }

    fn derivative(&self, t: f64, _x: &[f64], _e: &[f64], _v: &[C64], _h: &[f64], out: &mut [f64], _ho: &mut Vec<f64>) {
        let k = self.times.iter().position(|&s| (s - t).abs() < 1e-12).unwrap();
        let last = self.times.iter().rposition(|&s| (s - t).abs() < 1e-12).unwrap();
        let switch = k != last;
        let after = self.post_switch.get() == Some(t);
        // one-sided at a switch: left before the reset, right after it
        let left = (k > 0 && !(switch && after)).then(|| self.slope(k - 1)).flatten();
        let right = (last + 1 < self.times.len() && !(switch && !after))
            .then(|| self.slope(last))
            .flatten();
        let s = match (left, right) {
            (Some(a), Some(b)) => a.iter().zip(&b).map(|(a, b)| 0.5 * (a + b)).collect(),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => vec![0.0; out.len()],
        };
        out.copy_from_slice(&s);
    }

    fn reset_at_switch(&self, t: f64, e: &mut [f64]) {
        let k = self.times.iter().rposition(|&s| (s - t).abs() < 1e-12).unwrap();
        e.copy_from_slice(&self.values[k]);
        self.post_switch.set(Some(t));
    }
}

#[test]
fn replayed_tie_currents_reproduce_full_run() {
    let (g, p) = two_area();
    let s = FaultScenario::new(3, 0.5, 0.57);
    let cfg = SimConfig {
        t_end: 3.0,
        ..SimConfig::default()
    };
    let full = simulate_full(&g, Some(&s), &cfg, Some(&p)).unwrap();
    let oracle = Replay::new(&full, p.n_ports());
    let hybrid = Hybrid::pi(&g, &p, &FeatureSelector::default(), Some(&s)).unwrap();
    let hy = hybrid.simulate(&oracle, Some(&s), &cfg).unwrap();
    assert_eq!(hy.times, full.times);
    let mut worst: f64 = 0.0;
    for c in &hy.channels {
        let (a, b) = (hy.column(c).unwrap(), full.column(c).unwrap());
        let rms = (a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        worst = worst.max(rms);
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn open_ties_when_norton_pair_is_zero() {
    let (g, p) = two_area();
    let sel = FeatureSelector::ports(&p);
    let mut net = zero_net(&p, &sel);
    net.meta.variant = Variant::Dp;
    let np = p.n_ports();
    let dp = DpModel {
        d_matrix: DMatrix::zeros(np, np),
        net,
        port_order: p.ports.clone(),
    };
    let cfg = SimConfig {
        t_end: 1.0,
        ..SimConfig::default()
    };
    let s = FaultScenario::new(3, 0.2, 0.25);
    let hybrid = Hybrid::dp(&g, &p, &dp.d_matrix, &sel, Some(&s)).unwrap();
    let dynamics = NeuralDynamics::new(&dp.net, hybrid.features.clone());
    let nodes = schedule(0.0, cfg.dt, cfg.t_end, Some(&s));
    let zero = vec![0.0; 2 * np];
    let rec = hybrid.engine(&dynamics).run(&nodes, &hybrid.x0, &zero, &cfg).unwrap();
    // the same internal system with nothing injected at the ports
    let open = Engine {
        region: &hybrid.region,
        solvers: &hybrid.solvers,
        sites: &[],
        dynamics: None,
    }
    .run(&nodes, &hybrid.x0, &[], &cfg)
    .unwrap();
    for (a, b) in rec.states.iter().zip(&open.states) {
        assert_eq!(a.x, b.x);
        assert!(a.e.iter().all(|&e| e == 0.0));
    }
    // and the equilibrium hold through the driving-port path
    let t = simulate_hybrid_dp(&g, &p, &dp, None, &SimConfig { t_end: 10.0, ..cfg }).unwrap();
    assert!(max_drift(&t) < 1e-8);
}

#[test]
fn dp_hybrid_holds_equilibrium_with_nonzero_d() {
    let (g, p) = two_area();
    let sel = FeatureSelector::ports(&p);
    let mut net = zero_net(&p, &sel);
    net.meta.variant = Variant::Dp;
    let d = DMatrix::from_row_slice(2, 2, &[C64::new(-1.0, 8.0), C64::new(0.2, -1.0), C64::new(0.2, -1.0), C64::new(-0.8, 7.0)]);
    let dp = DpModel {
        d_matrix: d,
        net,
        port_order: p.ports.clone(),
    };
    let cfg = SimConfig {
        t_end: 10.0,
        ..SimConfig::default()
    };
    let t = simulate_hybrid_dp(&g, &p, &dp, None, &cfg).unwrap();
    assert!(max_drift(&t) < 1e-8, "{}", max_drift(&t));
    assert!(t.has_channel("tiecs2.i.im"));
}
