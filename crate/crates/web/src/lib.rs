//! Browser bindings: fault simulation, electrical distance and the modal
//! spectrum of a built-in test system. Results cross the boundary as JSON.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use neudye::evaluation::{electrical_distance, extract_modes, Mode};
use neudye::fixtures;
use neudye::grid::{FaultScenario, GridModel};
use neudye::simulator::{simulate_full, SimConfig, Trajectory};

const T_FAULT: f64 = 0.5;

#[derive(Debug, Serialize)]
pub struct Curves {
    pub times: Vec<f64>,
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

fn grid(name: &str) -> Result<GridModel, String> {
    fixtures::by_name(name).map(|(g, _)| g).ok_or_else(|| format!("unknown system `{name}`"))
}

fn run(system: &str, fault_bus: usize, t_clear: f64, t_end: f64) -> Result<(GridModel, Trajectory), String> {
    let g = grid(system)?;
    let s = FaultScenario::new(fault_bus, T_FAULT, t_clear);
    s.validate(&g).map_err(|e| e.to_string())?;
    let cfg = SimConfig {
        t_end,
        ..SimConfig::default()
    };
    let traj = simulate_full(&g, Some(&s), &cfg, None).map_err(|e| e.to_string())?;
    Ok((g, traj))
}

/// Rotor angles of every machine after a fault at `fault_bus` applied at
/// 0.5 s and cleared at `t_clear`.
pub fn fault_curves(system: &str, fault_bus: usize, t_clear: f64, t_end: f64) -> Result<Curves, String> {
    let (g, traj) = run(system, fault_bus, t_clear, t_end)?;
    let names: Vec<String> = (1..=g.generators.len()).map(|k| format!("gen{k}.delta")).collect();
    let values = names.iter().map(|n| traj.column(n)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    Ok(Curves {
        times: traj.times.clone(),
        names,
        values,
    })
}

pub fn distance(system: &str, train_buses: &[usize], test_bus: usize) -> Result<f64, String> {
    electrical_distance(&grid(system)?, train_buses, test_bus).map_err(|e| e.to_string())
}

/// Dominant post-fault oscillation modes of one machine's speed.
pub fn modes(system: &str, fault_bus: usize, t_clear: f64, machine: usize, n_modes: usize) -> Result<Vec<Mode>, String> {
    let (_, traj) = run(system, fault_bus, t_clear, 20.0)?;
    extract_modes(&traj, &format!("gen{machine}.omega"), t_clear, (0.3, 5.0), n_modes).map_err(|e| e.to_string())
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.map(|v| serde_json::to_string(&v).expect("serializes")).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = systems)]
pub fn js_systems() -> String {
    serde_json::to_string(&fixtures::FIXTURE_NAMES).expect("serializes")
}

/// JSON `{times, names, values}`.
#[wasm_bindgen(js_name = faultCurves)]
pub fn js_fault_curves(system: &str, fault_bus: usize, t_clear: f64, t_end: f64) -> Result<String, JsError> {
    to_js(fault_curves(system, fault_bus, t_clear, t_end))
}

#[wasm_bindgen(js_name = electricalDistance)]
pub fn js_distance(system: &str, train_buses: Vec<usize>, test_bus: usize) -> Result<f64, JsError> {
    distance(system, &train_buses, test_bus).map_err(|e| JsError::new(&e))
}

/// JSON array of `{freq_hz, magnitude}`.
#[wasm_bindgen(js_name = modeSpectrum)]
pub fn js_modes(system: &str, fault_bus: usize, t_clear: f64, machine: usize, n_modes: usize) -> Result<String, JsError> {
    to_js(modes(system, fault_bus, t_clear, machine, n_modes))
}
