use std::fmt;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Serialize;

use neudye::dp::{collect_port_events, d_matrix_from_json, d_matrix_to_json, estimate_d_matrix, kron_port_admittance, linear_equivalent, train_dp_neudye, DpModel};
use neudye::evaluation::{electrical_distance, evaluate, generate_scenarios, EvalConfig, Equivalent, ScenarioSet};
use neudye::fixtures;
use neudye::grid::{make_partition, solve_power_flow, FaultScenario, GridModel, Partition};
use neudye::simulator::{simulate_full, SimConfig, Trajectory};
use neudye::training::{train_discrete_baseline, train_pi_neudye, Sample, TrainConfig, TrainReport};

use crate::manifest::{beside, RunManifest};
use crate::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Validation(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<neudye::Error> for CliError {
    fn from(e: neudye::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn load_grid(path: &Path, m: &mut RunManifest) -> Result<GridModel> {
    m.input(path)?;
    Ok(GridModel::from_json(&read(path)?)?)
}

fn load_partition(grid: &GridModel, path: &Path, m: &mut RunManifest) -> Result<Partition> {
    m.input(path)?;
    Ok(Partition::from_json(grid, &read(path)?)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn run(command: Command, args: &[String]) -> Result<()> {
    let mut m = RunManifest::new(args);
    match command {
        Command::Fixture { name, out } => fixture(&name, &out, m),
        Command::Simulate {
            grid,
            scenario,
            config,
            partition,
            out,
        } => {
            let g = load_grid(&grid, &mut m)?;
            let p = match &partition {
                Some(p) => Some(load_partition(&g, p, &mut m)?),
                None => None,
            };
            simulate(&g, p.as_ref(), &scenario, &config, &out, m)
        }
        Command::Scenarios {
            buses,
            t_fault,
            clear_min,
            clear_max,
            count,
            seed,
            out,
        } => {
            let set = generate_scenarios(&buses, t_fault, clear_min, clear_max, count, seed)?;
            write(&out, &(set.to_json() + "\n"))?;
            m.seed = Some(seed);
            m.output(&out);
            m.write(&beside(&out))
        }
        Command::Train {
            variant,
            d_matrix,
            grid,
            partition,
            data,
            config,
            out,
        } => {
            let g = load_grid(&grid, &mut m)?;
            let p = load_partition(&g, &partition, &mut m)?;
            train(&variant, d_matrix.as_deref(), &g, &p, &data, &config, &out, m)
        }
        Command::Eval {
            models,
            grid,
            partition,
            test,
            train,
            config,
            out,
        } => {
            let g = load_grid(&grid, &mut m)?;
            let p = load_partition(&g, &partition, &mut m)?;
            eval(&models, &g, &p, &test, &train, config.as_deref(), &out, m)
        }
        Command::Distance {
            grid,
            train_buses,
            test_bus,
        } => {
            let g = GridModel::from_json(&read(&grid)?)?;
            println!("{}", electrical_distance(&g, &train_buses, test_bus)?);
            Ok(())
        }
        Command::Rerun { manifest } => rerun(&manifest),
    }
}

fn fixture(name: &str, out: &Path, mut m: RunManifest) -> Result<()> {
    let (grid, internal) = fixtures::by_name(name).ok_or_else(|| {
        CliError::Validation(format!("unknown fixture `{name}` (expected one of {})", fixtures::FIXTURE_NAMES.join(", ")))
    })?;
    grid.validate()?;
    solve_power_flow(&grid)?;
    let partition = make_partition(&grid, &internal)?;
    create_dir(out)?;
    let put = |file: &str, text: String, m: &mut RunManifest| -> Result<()> {
        let path = out.join(file);
        write(&path, &text)?;
        m.output(&path);
        Ok(())
    };
    put("grid.json", json(&grid), &mut m)?;
    put("partition.json", partition.to_json() + "\n", &mut m)?;
    if !grid.linear_sources.is_empty() {
        // ground truth for oracle tests: the port admittance and the exact equivalent
        put("d_matrix.json", d_matrix_to_json(&kron_port_admittance(&grid, &partition)?) + "\n", &mut m)?;
        put("equivalent.json", linear_equivalent(&grid, &partition)?.to_json() + "\n", &mut m)?;
    }
    m.write(&out.join("manifest.json"))
}

fn scenario_sidecar(csv: &Path) -> PathBuf {
    csv.with_extension("scenario.json")
}

fn simulate(grid: &GridModel, partition: Option<&Partition>, scenario: &Path, config: &Path, out: &Path, mut m: RunManifest) -> Result<()> {
    m.input(scenario)?;
    m.input(config)?;
    let cfg: SimConfig = parse(config)?;
    cfg.validate()?;
    m.config = serde_json::to_value(&cfg).expect("config serializes");
    let value: serde_json::Value = parse(scenario)?;
    let run_one = |s: Option<&FaultScenario>, csv: &Path, m: &mut RunManifest| -> Result<()> {
        let traj = simulate_full(grid, s, &cfg, partition)?;
        traj.save(csv)?;
        m.output(csv);
        if let Some(s) = s {
            let side = scenario_sidecar(csv);
            write(&side, &json(s))?;
            m.output(&side);
        }
        Ok(())
    };
    if value.get("scenarios").is_some() {
        let set = ScenarioSet::from_json(&value.to_string())?;
        for s in &set.scenarios {
            s.validate(grid)?;
        }
        create_dir(out)?;
        for (i, s) in set.scenarios.iter().enumerate() {
            run_one(Some(s), &out.join(format!("scenario_{i:03}.csv")), &mut m)?;
        }
        m.write(&out.join("manifest.json"))
    } else {
        let s: Option<FaultScenario> =
            serde_json::from_value(value).map_err(|e| CliError::Validation(format!("{}: {e}", scenario.display())))?;
        if let Some(s) = &s {
            s.validate(grid)?;
        }
        run_one(s.as_ref(), out, &mut m)?;
        m.write(&beside(out))
    }
}

/// Trajectories `*.csv` of a directory in name order, each with its
/// optional `<stem>.scenario.json`.
fn load_dataset(dir: &Path, m: &mut RunManifest) -> Result<Vec<Sample>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Validation(format!("{}: no trajectory files", dir.display())));
    }
    files
        .iter()
        .map(|f| {
            m.input(f)?;
            let trajectory = Trajectory::load(f)?;
            let side = scenario_sidecar(f);
            let scenario = if side.exists() {
                m.input(&side)?;
                Some(parse(&side)?)
            } else {
                None
            };
            Ok(Sample { trajectory, scenario })
        })
        .collect()
}

/// The training report without wall-clock data, so reruns compare equal.
#[derive(Serialize)]
struct TrainSummary<'a> {
    variant: &'a str,
    iterations: usize,
    converged: bool,
    aborted: bool,
    best_loss: f64,
    loss_history: &'a [f64],
    grad_norm_history: &'a [f64],
}

#[allow(clippy::too_many_arguments)]
fn train(
    variant: &str,
    d_matrix: Option<&Path>,
    grid: &GridModel,
    partition: &Partition,
    data: &Path,
    config: &Path,
    out: &Path,
    mut m: RunManifest,
) -> Result<()> {
    m.input(config)?;
    let mut cfg: TrainConfig = parse(config)?;
    cfg.variant = variant.parse()?;
    cfg.validate()?;
    m.config = serde_json::to_value(&cfg).expect("config serializes");
    m.seed = Some(cfg.seed);
    let dataset = load_dataset(data, &mut m)?;
    let (report, artifact): (TrainReport, String) = match variant {
        "pi" => {
            let r = train_pi_neudye(grid, partition, &dataset, &cfg)?;
            let a = json(&r.model);
            (r, a)
        }
        "discrete" => {
            let r = train_discrete_baseline(grid, partition, &dataset, &cfg)?;
            let a = json(&r.model);
            (r, a)
        }
        _ => {
            let d = match d_matrix {
                Some(f) => {
                    m.input(f)?;
                    d_matrix_from_json(&read(f)?)?
                }
                None => {
                    let trajs: Vec<Trajectory> = dataset.iter().map(|s| s.trajectory.clone()).collect();
                    let scen: Vec<Option<FaultScenario>> = dataset.iter().map(|s| s.scenario.clone()).collect();
                    estimate_d_matrix(&collect_port_events(&trajs, &scen)?)?
                }
            };
            let r = train_dp_neudye(grid, partition, &dataset, &d, &cfg, variant == "dp-rnn")?;
            let a = DpModel::new(d, r.model.clone(), partition)?.to_json() + "\n";
            (r, a)
        }
    };
    write(out, &artifact)?;
    m.output(out);
    let mut report_path = out.as_os_str().to_owned();
    report_path.push(".report.json");
    let report_path = PathBuf::from(report_path);
    let summary = TrainSummary {
        variant,
        iterations: report.iterations,
        converged: report.converged,
        aborted: report.aborted,
        best_loss: report.best_loss,
        loss_history: &report.loss_history,
        grad_norm_history: &report.grad_norm_history,
    };
    write(&report_path, &json(&summary))?;
    m.output(&report_path);
    m.timings.insert("mean_iter_time_s".into(), report.mean_iter_time());
    m.timings.insert("total_train_time_s".into(), report.iter_time_s.iter().sum());
    m.write(&beside(out))
}

#[allow(clippy::too_many_arguments)]
fn eval(
    models: &[PathBuf],
    grid: &GridModel,
    partition: &Partition,
    test: &Path,
    train: &Path,
    config: Option<&Path>,
    out: &Path,
    mut m: RunManifest,
) -> Result<()> {
    if models.is_empty() {
        return Err(CliError::Validation("no models given".into()));
    }
    let cfg: EvalConfig = match config {
        Some(c) => {
            m.input(c)?;
            parse(c)?
        }
        None => EvalConfig::default(),
    };
    cfg.sim.validate()?;
    m.config = serde_json::to_value(&cfg).expect("config serializes");
    let mut named = Vec::new();
    for f in models {
        m.input(f)?;
        let name = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        named.push((name, Equivalent::from_json(&read(f)?)?));
    }
    m.input(test)?;
    m.input(train)?;
    let test_set = ScenarioSet::from_json(&read(test)?)?;
    let train_set = ScenarioSet::from_json(&read(train)?)?;
    let report = evaluate(&named, grid, partition, &test_set, &train_set, &cfg)?;
    write(out, &(report.to_json() + "\n"))?;
    m.output(out);
    let csv_path = out.with_extension("csv");
    let f = std::fs::File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    report.write_csv(f)?;
    m.output(&csv_path);
    m.write(&beside(out))
}

fn rerun(manifest: &Path) -> Result<()> {
    let m = RunManifest::load(manifest)?;
    let changed = m.changed_inputs()?;
    if !changed.is_empty() {
        return Err(CliError::Validation(format!("inputs changed since the recorded run: {}", changed.join(", "))));
    }
    let mut argv = vec!["neudye".to_string()];
    argv.extend(m.command.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::Validation(e.to_string()))?;
    if matches!(cli.command, Command::Rerun { .. }) {
        return Err(CliError::Validation("manifest records a rerun".into()));
    }
    std::env::set_current_dir(&m.cwd).map_err(|e| CliError::io(&m.cwd, e))?;
    run(cli.command, &m.command)
}
