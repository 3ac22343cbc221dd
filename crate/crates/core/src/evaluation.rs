//! Scenario sets, closed-loop accuracy, oscillation modes and electrical
//! distance.

use std::collections::BTreeMap;

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dp::DpModel;
use crate::grid::{FaultScenario, GridModel, Partition};
use crate::neuralnet::NeuralEquivalence;
use crate::simulator::{complex_names, simulate_full, simulate_hybrid_dp, simulate_hybrid_pi, SimConfig, Trajectory};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub scenarios: Vec<FaultScenario>,
    pub role: Role,
    pub seed: u64,
}

impl ScenarioSet {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario set serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Distinct fault buses in first-seen order.
    pub fn buses(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for s in &self.scenarios {
            if !out.contains(&s.fault_bus) {
                out.push(s.fault_bus);
            }
        }
        out
    }
}

/// `count` faults cycling through `buses`, each cleared at a time drawn
/// uniformly from `[clear_min, clear_max]`.
pub fn generate_scenarios(buses: &[usize], t_fault: f64, clear_min: f64, clear_max: f64, count: usize, seed: u64) -> Result<ScenarioSet> {
    if buses.is_empty() && count > 0 {
        return Err(Error::Validation("no fault buses given".into()));
    }
    if !(t_fault >= 0.0 && clear_min > t_fault && clear_max > clear_min) {
        return Err(Error::Validation(format!(
            "need 0 <= t_fault < clear_min < clear_max, got {t_fault}, {clear_min}, {clear_max}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenarios = (0..count)
        .map(|k| FaultScenario::new(buses[k % buses.len()], t_fault, rng.gen_range(clear_min..=clear_max)))
        .collect();
    Ok(ScenarioSet {
        scenarios,
        role: Role::Train,
        seed,
    })
}

/// Per-channel RMS error ratios and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelErrors {
    pub channels: Vec<String>,
    pub errors: Vec<f64>,
    pub aggregate: f64,
}

/// `RMS(pred - truth) / RMS(truth)` per channel over `t >= t_start`, where
/// both trajectories share samples. A diverged prediction scores infinity.
pub fn trajectory_error(pred: &Trajectory, truth: &Trajectory, channels: &[String], t_start: f64) -> Result<ChannelErrors> {
    let mut pc = Vec::with_capacity(channels.len());
    let mut tc = Vec::with_capacity(channels.len());
    for c in channels {
        pc.push(pred.channel_index(c)?);
        tc.push(truth.channel_index(c)?);
    }
    if pred.diverged {
        return Ok(ChannelErrors {
            channels: channels.to_vec(),
            errors: vec![f64::INFINITY; channels.len()],
            aggregate: f64::INFINITY,
        });
    }
    if (pred.dt - truth.dt).abs() > 1e-12 * truth.dt {
        return Err(Error::Validation(format!("sample steps differ: {} vs {}", pred.dt, truth.dt)));
    }
    let t_end = pred.times.last().copied().unwrap_or(f64::NEG_INFINITY).min(truth.times.last().copied().unwrap_or(f64::NEG_INFINITY));
    let pr = pred.rows_in(t_start, t_end);
    let tr = truth.rows_in(t_start, t_end);
    if pr.is_empty() || pr.len() != tr.len() || pr.iter().zip(&tr).any(|(&a, &b)| (pred.times[a] - truth.times[b]).abs() > 1e-9 * truth.dt) {
        return Err(Error::Validation("trajectories do not share samples on the error window".into()));
    }
    let mut errors = Vec::with_capacity(channels.len());
    for (k, name) in channels.iter().enumerate() {
        let (mut num, mut den) = (0.0, 0.0);
        for (&a, &b) in pr.iter().zip(&tr) {
            let t = truth.value(b, tc[k]);
            num += (pred.value(a, pc[k]) - t).powi(2);
            den += t * t;
        }
        if den == 0.0 {
            return Err(Error::Validation(format!("channel `{name}` is identically zero; relative error undefined")));
        }
        let e = (num / den).sqrt();
        errors.push(if e.is_finite() { e } else { f64::INFINITY });
    }
    let aggregate = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
    Ok(ChannelErrors {
        channels: channels.to_vec(),
        errors,
        aggregate,
    })
}

/// Tie currents and port voltages: what an equivalent must reproduce.
pub fn boundary_channels(partition: &Partition) -> Vec<String> {
    let np = partition.n_ports();
    let mut c = complex_names("tie", "i", 1..=np);
    c.extend(complex_names("port", "v", 1..=np));
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub freq_hz: f64,
    pub magnitude: f64,
}

/// Largest spectral peaks of a channel in `band_hz`, from a mean-removed,
/// unwindowed DFT over the uniform samples from `t_start` on. Magnitudes
/// are single-sided amplitudes, strongest first.
pub fn extract_modes(trajectory: &Trajectory, channel: &str, t_start: f64, band_hz: (f64, f64), n_modes: usize) -> Result<Vec<Mode>> {
    let (lo, hi) = band_hz;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Validation(format!("invalid band {lo}..{hi} Hz")));
    }
    let c = trajectory.channel_index(channel)?;
    let rows = trajectory.uniform_rows(t_start);
    let n = rows.len();
    let dt = trajectory.dt;
    if (n as f64) * dt < 5.0 / lo {
        return Err(Error::Validation(format!(
            "{:.3} s of data is shorter than the {:.3} s needed to resolve {lo} Hz",
            n as f64 * dt,
            5.0 / lo
        )));
    }
    let x: Vec<f64> = rows.iter().map(|&r| trajectory.value(r, c)).collect();
    Ok(spectral_peaks(&x, dt, band_hz, n_modes))
}

fn spectral_peaks(x: &[f64], dt: f64, (lo, hi): (f64, f64), n_modes: usize) -> Vec<Mode> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let amp: Vec<f64> = (0..=half)
        .map(|k| {
            let a = buf[k].norm() / n as f64;
            if k == 0 || (n % 2 == 0 && k == half) {
                a
            } else {
                2.0 * a
            }
        })
        .collect();
    let df = 1.0 / (n as f64 * dt);
    let mut peaks: Vec<Mode> = (1..half)
        .filter(|&k| {
            let f = k as f64 * df;
            f >= lo && f <= hi && amp[k] > amp[k - 1] && amp[k] >= amp[k + 1]
        })
        .map(|k| Mode {
            freq_hz: k as f64 * df,
            magnitude: amp[k],
        })
        .collect();
    peaks.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude));
    peaks.truncate(n_modes);
    peaks
}

/// Shortest reactance path from `test_bus` to the nearest training fault
/// bus. Parallel branches combine as reciprocal sums.
pub fn electrical_distance(grid: &GridModel, train_buses: &[usize], test_bus: usize) -> Result<f64> {
    let n = grid.n_bus();
    let valid = |b: usize| b >= 1 && b <= n;
    if !valid(test_bus) || train_buses.iter().any(|&b| !valid(b)) {
        return Err(Error::Validation("bus id out of range".into()));
    }
    if train_buses.contains(&test_bus) {
        return Ok(0.0);
    }
    let mut susceptance: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for br in &grid.branches {
        if br.from_bus == br.to_bus {
            continue;
        }
        let key = (br.from_bus.min(br.to_bus), br.from_bus.max(br.to_bus));
        *susceptance.entry(key).or_default() += 1.0 / br.x.abs();
    }
    let mut g = UnGraph::<(), f64>::with_capacity(n, susceptance.len());
    let nodes: Vec<NodeIndex> = (0..n).map(|_| g.add_node(())).collect();
    for (&(a, b), &s) in &susceptance {
        g.add_edge(nodes[a - 1], nodes[b - 1], 1.0 / s);
    }
    let dist = dijkstra(&g, nodes[test_bus - 1], None, |e| *e.weight());
    train_buses
        .iter()
        .filter_map(|&b| dist.get(&nodes[b - 1]).copied())
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::Validation(format!("bus {test_bus} is not connected to any training bus")))
}

/// A trained equivalent ready for closed-loop testing.
#[derive(Clone, Debug, PartialEq)]
pub enum Equivalent {
    /// Tie currents as neural states (physics-informed or discrete baseline).
    Pi(NeuralEquivalence),
    Dp(DpModel),
}

impl Equivalent {
    /// Either artifact kind; driving-port models carry a `d` key.
    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        if v.get("d").is_some() {
            DpModel::from_json(s).map(Self::Dp)
        } else {
            NeuralEquivalence::from_json(s).map(Self::Pi)
        }
    }

    pub fn net(&self) -> &NeuralEquivalence {
        match self {
            Self::Pi(m) => m,
            Self::Dp(m) => &m.net,
        }
    }

    pub fn simulate(&self, grid: &GridModel, partition: &Partition, scenario: Option<&FaultScenario>, cfg: &SimConfig) -> Result<Trajectory> {
        match self {
            Self::Pi(m) => simulate_hybrid_pi(grid, partition, m, scenario, cfg),
            Self::Dp(m) => simulate_hybrid_dp(grid, partition, m, scenario, cfg),
        }
    }
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        v.is_finite().then_some(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            v.iter().map(|x| x.is_finite().then_some(*x)).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Option<f64>>::deserialize(d)?
                .into_iter()
                .map(|x| x.unwrap_or(f64::INFINITY))
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub sim: SimConfig,
    /// Channels scored; defaults to [`boundary_channels`].
    pub channels: Option<Vec<String>>,
    /// Channel, band and count for the mode table; skipped when the
    /// post-fault record is too short for the band.
    pub modes: Option<ModeConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            channels: None,
            modes: Some(ModeConfig::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeConfig {
    pub channel: String,
    pub band_hz: (f64, f64),
    pub n_modes: usize,
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self {
            channel: "tie1.i.re".into(),
            band_hz: (1.0, 3.0),
            n_modes: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: usize,
    pub bus: usize,
    pub t_clear: f64,
    pub model: usize,
    #[serde(with = "inf_as_null::vec")]
    pub errors: Vec<f64>,
    #[serde(with = "inf_as_null")]
    pub aggregate: f64,
    pub diverged: bool,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(with = "inf_as_null")]
    pub mean: f64,
    #[serde(with = "inf_as_null")]
    pub max: f64,
    #[serde(with = "inf_as_null::vec")]
    pub quartiles: Vec<f64>,
    pub n_diverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub scenario: usize,
    pub model: usize,
    pub full: Vec<Mode>,
    pub hybrid: Vec<Mode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub channels: Vec<String>,
    pub models: Vec<String>,
    pub results: Vec<ScenarioResult>,
    pub summary: Vec<Summary>,
    pub modes: Vec<ModeRow>,
}

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
            let (i, frac) = (h.floor() as usize, h - h.floor());
            let (a, b) = (sorted[i], sorted[(i + 1).min(n - 1)]);
            if frac == 0.0 || a == b {
                a
            } else {
                a + frac * (b - a)
            }
        }
    }
}

/// Mean, max, quartiles and divergence count of per-scenario aggregates.
pub fn summarize(aggregates: &[f64], diverged: &[bool]) -> Summary {
    let mut sorted = aggregates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Summary {
        mean: if n == 0 { f64::NAN } else { sorted.iter().sum::<f64>() / n as f64 },
        max: sorted.last().copied().unwrap_or(f64::NAN),
        quartiles: [0.25, 0.5, 0.75].iter().map(|&q| quantile(&sorted, q)).collect(),
        n_diverged: diverged.iter().filter(|&&d| d).count(),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Flat rows `scenario,bus,t_clear,model,channel,rel_err,distance,diverged`,
    /// one per scored channel plus an `aggregate` row.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["scenario", "bus", "t_clear", "model", "channel", "rel_err", "distance", "diverged"])?;
        let fmt = |v: f64| if v.is_finite() { format!("{v:e}") } else { "inf".into() };
        for r in &self.results {
            let names = self.channels.iter().map(String::as_str).chain(["aggregate"]);
            let vals = r.errors.iter().copied().chain([r.aggregate]);
            for (c, e) in names.zip(vals) {
                out.write_record([
                    r.scenario.to_string(),
                    r.bus.to_string(),
                    format!("{}", r.t_clear),
                    self.models[r.model].clone(),
                    c.to_string(),
                    fmt(e),
                    format!("{:e}", r.distance),
                    r.diverged.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

struct ScenarioOutcome {
    results: Vec<ScenarioResult>,
    modes: Vec<ModeRow>,
}

/// Closed-loop test of every model on every test scenario against the full
/// simulation. Numerical failures of a hybrid run count as divergence.
pub fn evaluate(
    models: &[(String, Equivalent)],
    grid: &GridModel,
    partition: &Partition,
    test_set: &ScenarioSet,
    train_set: &ScenarioSet,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let channels = cfg.channels.clone().unwrap_or_else(|| boundary_channels(partition));
    let train_buses = train_set.buses();
    let outcomes: Vec<ScenarioOutcome> = test_set
        .scenarios
        .par_iter()
        .enumerate()
        .map(|(si, s)| -> Result<ScenarioOutcome> {
            let truth = simulate_full(grid, Some(s), &cfg.sim, Some(partition))?;
            let distance = if train_buses.is_empty() {
                f64::INFINITY
            } else {
                electrical_distance(grid, &train_buses, s.fault_bus)?
            };
            let full_modes = cfg
                .modes
                .as_ref()
                .and_then(|m| extract_modes(&truth, &m.channel, s.t_clear, m.band_hz, m.n_modes).ok());
            let mut out = ScenarioOutcome {
                results: Vec::new(),
                modes: Vec::new(),
            };
            for (mi, (_, model)) in models.iter().enumerate() {
                let pred = match model.simulate(grid, partition, Some(s), &cfg.sim) {
                    Ok(t) => Some(t),
                    Err(e) if e.is_numerical() => None,
                    Err(e) => return Err(e),
                };
                let errs = match &pred {
                    Some(p) => trajectory_error(p, &truth, &channels, s.t_clear)?,
                    None => ChannelErrors {
                        channels: channels.clone(),
                        errors: vec![f64::INFINITY; channels.len()],
                        aggregate: f64::INFINITY,
                    },
                };
                let diverged = pred.as_ref().map_or(true, |p| p.diverged);
                if let (Some(m), Some(full), Some(p)) = (&cfg.modes, &full_modes, &pred) {
                    if !diverged {
                        if let Ok(hybrid) = extract_modes(p, &m.channel, s.t_clear, m.band_hz, m.n_modes) {
                            out.modes.push(ModeRow {
                                scenario: si,
                                model: mi,
                                full: full.clone(),
                                hybrid,
                            });
                        }
                    }
                }
                out.results.push(ScenarioResult {
                    scenario: si,
                    bus: s.fault_bus,
                    t_clear: s.t_clear,
                    model: mi,
                    errors: errs.errors,
                    aggregate: errs.aggregate,
                    diverged,
                    distance,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut results = Vec::new();
    let mut modes = Vec::new();
    for o in outcomes {
        results.extend(o.results);
        modes.extend(o.modes);
    }
    let summary = (0..models.len())
        .map(|mi| {
            let rows: Vec<&ScenarioResult> = results.iter().filter(|r| r.model == mi).collect();
            let agg: Vec<f64> = rows.iter().map(|r| r.aggregate).collect();
            let div: Vec<bool> = rows.iter().map(|r| r.diverged).collect();
            summarize(&agg, &div)
        })
        .collect();
    Ok(EvalReport {
        channels,
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        results,
        summary,
        modes,
    })
}
