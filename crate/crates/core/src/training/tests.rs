use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::fixtures;
use crate::grid::make_partition;
use crate::neuralnet::{Feature, Part};
use crate::simulator::simulate_full;

fn meta() -> ModelMeta {
    ModelMeta {
        variant: Variant::Pi,
        partition_hash: String::new(),
    }
}

fn scalar_model(theta: f64) -> NeuralEquivalence {
    let mut m = NeuralEquivalence::new(vec![1, 1], Activation::Tanh, false, 0, meta()).unwrap();
    m.theta = vec![theta, 0.0];
    m
}

fn grid_times(t_end: f64, h: f64) -> Vec<f64> {
    let n = (t_end / h).round() as usize;
    (0..=n).map(|k| k as f64 * h).collect()
}

#[test]
fn sgd_and_adam_closed_forms() {
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        lr: 1.0,
        ..TrainConfig::default()
    };
    let mut st = OptimizerState::default();
    let mut th = vec![0.3, -2.0];
    let g = th.clone();
    optimizer_step(&mut st, &mut th, &g, &cfg).unwrap();
    assert_eq!(th, vec![0.0, 0.0]);

    let cfg = TrainConfig {
        lr: 0.01,
        ..TrainConfig::default()
    };
    // zero gradient: parameters fixed, moments decay
    let mut st = OptimizerState {
        m: vec![1.0],
        v: vec![1.0],
        t: 3,
    };
    let mut th = vec![0.5];
    optimizer_step(&mut st, &mut th, &[0.0], &cfg).unwrap();
    assert!((st.m[0] - 0.9).abs() < 1e-15 && (st.v[0] - 0.999).abs() < 1e-15);
    let mut st = OptimizerState::default();
    let mut th = vec![0.5];
    optimizer_step(&mut st, &mut th, &[0.0], &cfg).unwrap();
    assert_eq!(th, vec![0.5]);
    // first step from zero moments: mh = g, vh = g^2
    let mut st = OptimizerState::default();
    let mut th = vec![1.0, 1.0];
    optimizer_step(&mut st, &mut th, &[2.0, -0.5], &cfg).unwrap();
    assert!((th[0] - (1.0 - 0.01 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
    assert!((th[1] - (1.0 + 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    assert!(optimizer_step(&mut st, &mut th, &[f64::NAN, 0.0], &cfg).is_err());
}

#[test]
fn config_json_keys_and_defaults() {
    let text = r#"{"lr":1e-3,"optimizer":"adam","max_iters":3000,"tol":1e-8,"batch":0,"window_s":3.0,"dt":0.005,"seed":42,"arch":[64,64],"activation":"tanh","variant":"pi"}"#;
    let cfg: TrainConfig = serde_json::from_str(text).unwrap();
    assert_eq!(cfg, TrainConfig::default());
    assert!(TrainConfig { window_s: 0.005, ..cfg.clone() }.validate().is_err());
    assert!(TrainConfig { lr: 0.0, ..cfg }.validate().is_err());
}

#[test]
fn scalar_linear_loss_and_gradient() {
    let (theta, t_end, target) = (-0.7, 1.0, 0.3);
    for h in [1e-2, 1e-4] {
        let times = grid_times(t_end, h);
        let n = times.len();
        let mut weights = vec![0.0; n];
        weights[n - 1] = 1.0;
        let w = TeacherWindow {
            z: vec![Vec::new(); n],
            e_hat: (0..n).map(|k| vec![if k == 0 { 1.0 } else { target }]).collect(),
            weights,
            times,
        };
        let cfg = TrainConfig::default();
        let model = scalar_model(theta);
        let g = adjoint_backward(&model, &Window::Teacher(w), &cfg, LossVariant::ExOnly).unwrap();
        // exact derivative of the discrete solution x_n = r^n
        let steps = (n - 1) as f64;
        let r = 1.0 + theta * h + 0.5 * (theta * h).powi(2);
        let x_n = r.powf(steps);
        let discrete = (x_n - target) * steps * r.powf(steps - 1.0) * (h + theta * h * h);
        assert!((g.adjoint.g[0] - discrete).abs() < 1e-8 * discrete.abs(), "h={h}");
        let discrete_loss = 0.5 * (x_n - target).powi(2);
        assert!((g.loss - discrete_loss).abs() < 1e-10 * discrete_loss, "{} {}", g.loss, discrete_loss);
        if h < 1e-3 {
            let x_t = (theta * t_end).exp();
            assert!((g.loss - 0.5 * (x_t - target).powi(2)).abs() < 1e-8);
            let analytic = (x_t - target) * t_end * x_t;
            assert!((g.adjoint.g[0] - analytic).abs() < 1e-6 * analytic.abs());
        }
        // bias gradient: dx/db of the same recurrence
        assert!(g.adjoint.g[1].is_finite());
    }
}

#[test]
fn zero_residual_and_zero_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = NeuralEquivalence::new(vec![4, 5, 2], Activation::Tanh, false, 3, meta()).unwrap();
    for t in &mut model.theta {
        *t += rng.gen_range(-0.2..0.2);
    }
    let times = grid_times(0.5, 0.01);
    let z: Vec<Vec<f64>> = times.iter().map(|t| vec![t.sin(), (2.0 * t).cos()]).collect();
    let n = times.len();
    let mut w = TeacherWindow {
        z,
        e_hat: vec![vec![0.1, -0.2]; n],
        weights: vec![1.0; n],
        times,
    };
    let mut ws = Workspace::default();
    let fw = teacher_forward(&model, &w, 1e3, &mut ws);
    w.e_hat = fw.e.clone();
    let cfg = TrainConfig::default();
    let g = adjoint_backward(&model, &Window::Teacher(w.clone()), &cfg, LossVariant::ExOnly).unwrap();
    assert_eq!(g.loss, 0.0);
    assert!(g.adjoint.g.iter().chain(&g.adjoint.lambda).all(|&v| v == 0.0));
    w.e_hat = vec![vec![5.0, 5.0]; n];
    w.weights = vec![0.0; n];
    let g = adjoint_backward(&model, &Window::Teacher(w), &cfg, LossVariant::ExOnly).unwrap();
    assert_eq!(g.loss, 0.0);
    let check = compare_gradients(vec![0.0; 3], vec![0.0; 3]);
    assert_eq!(check.max_rel_error, 0.0);
}

struct Case {
    grid: GridModel,
    partition: Partition,
    samples: Vec<Sample>,
}

fn case(name: &str, fault_bus: usize) -> Case {
    let (grid, internal) = fixtures::by_name(name).unwrap();
    let partition = make_partition(&grid, &internal).unwrap();
    let cfg = SimConfig {
        dt: 0.01,
        t_end: 0.5,
        ..SimConfig::default()
    };
    // clearing off the sample grid exercises the inserted node pair
    let samples = [(0.1, 0.155), (0.12, 0.18)]
        .iter()
        .map(|&(a, b)| {
            let s = FaultScenario::new(fault_bus, a, b);
            Sample {
                trajectory: simulate_full(&grid, Some(&s), &cfg, Some(&partition)).unwrap(),
                scenario: Some(s),
            }
        })
        .collect();
    Case { grid, partition, samples }
}

fn check_cfg() -> TrainConfig {
    TrainConfig {
        dt: 0.01,
        window_s: 0.25,
        lead_s: 0.05,
        newton_tol: 1e-14,
        max_newton_iters: 200,
        ..TrainConfig::default()
    }
}

fn randomize(model: &mut NeuralEquivalence, rng: &mut ChaCha8Rng, out_scale: f64) {
    for t in &mut model.theta {
        *t += rng.gen_range(-0.3..0.3);
    }
    for p in &mut model.output_norm {
        *p = [rng.gen_range(-0.2..0.2) * out_scale, out_scale * rng.gen_range(0.5..1.5)];
    }
}

#[test]
fn adjoint_matches_finite_differences() {
    let cases = [case("two-area-4m", 3), case("nine-bus-3m", 8)];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut configs = 0;
    let mut worst: f64 = 0.0;
    for round in 0..4 {
        for (ci, c) in cases.iter().enumerate() {
            let gens: Vec<usize> = (0..c.grid.generators.len())
                .filter(|&k| c.partition.is_internal(c.grid.generators[k].bus))
                .collect();
            let line = (0..c.grid.branches.len())
                .find(|&k| c.partition.is_internal(c.grid.branches[k].from_bus) && c.partition.is_internal(c.grid.branches[k].to_bus))
                .unwrap();
            let selectors = [
                FeatureSelector::ports(&c.partition),
                FeatureSelector::rich(&c.grid, &c.partition),
                FeatureSelector::new(vec![
                    Feature::MachineDelta(gens[0] + 1),
                    Feature::MachineOmega(gens[1] + 1),
                    Feature::LineI(line + 1, Part::Re),
                    Feature::LineI(line + 1, Part::Im),
                    Feature::TieI(1, Part::Re),
                    Feature::TieI(2, Part::Im),
                ]),
            ];
            for (si, sel) in selectors.iter().enumerate() {
                let variant = [LossVariant::Pi, LossVariant::ExOnly][(round + si + ci) % 2];
                let cfg = check_cfg();
                let problem = Problem::closed_loop(&c.grid, &c.partition, &c.samples[..1 + round % 2], sel, &cfg).unwrap();
                let arch = if round % 2 == 0 { vec![4] } else { vec![3, 3] };
                let tcfg = TrainConfig {
                    arch,
                    seed: rng.gen(),
                    ..cfg.clone()
                };
                let mut model = initial_model(&problem, 4, &tcfg, meta()).unwrap();
                randomize(&mut model, &mut rng, 2.0);
                let check = grad_check(&model, &problem, &cfg, variant, 1e-5).unwrap();
                assert!(check.finite_difference.iter().any(|&g| g != 0.0));
                assert!(check.max_rel_error < 1e-4, "case {ci} selector {si} {variant:?}: {}", check.max_rel_error);
                worst = worst.max(check.max_rel_error);
                configs += 1;
            }
        }
    }
    // teacher-forced windows on port voltages (the driving-port setting)
    for k in 0..4 {
        let c = &cases[k % 2];
        let cfg = check_cfg();
        let state = complex_names("tie", "i", 1..=c.partition.n_ports());
        let problem = Problem::teacher(&c.samples, &state, &FeatureSelector::ports(&c.partition), &cfg).unwrap();
        let tcfg = TrainConfig {
            arch: vec![5],
            activation: if k < 2 { Activation::Tanh } else { Activation::Relu },
            ..cfg.clone()
        };
        let mut model = initial_model(&problem, 4, &tcfg, meta()).unwrap();
        randomize(&mut model, &mut rng, 5.0);
        let check = grad_check(&model, &problem, &cfg, LossVariant::ExOnly, 1e-5).unwrap();
        assert!(check.max_rel_error < 1e-4, "teacher {k}: {}", check.max_rel_error);
        worst = worst.max(check.max_rel_error);
        configs += 1;
    }
    assert!(configs >= 20);
    eprintln!("{configs} configurations, worst relative error {worst:.3e}");
}

fn linear_data(a: &DMatrix<f64>, b: &DMatrix<f64>, h: f64, t_end: f64, phase: f64, implicit: bool) -> TeacherWindow {
    let times = grid_times(t_end, h);
    let z: Vec<Vec<f64>> = times
        .iter()
        .map(|t| vec![(1.3 * t + phase).sin(), (0.7 * t - phase).cos()])
        .collect();
    let rhs = |e: &DVector<f64>, z: &[f64]| a * e + b * DVector::from_column_slice(z);
    let mut e = vec![DVector::from_vec(vec![0.2 * phase.cos(), -0.1])];
    for k in 0..times.len() - 1 {
        let ek = &e[k];
        let f0 = rhs(ek, &z[k]);
        let next = if implicit {
            // (I - h/2 A) e1 = e0 + h/2 (f0 + B z1)
            let m = DMatrix::identity(2, 2) - a * (0.5 * h);
            let r = ek + (f0 + b * DVector::from_column_slice(&z[k + 1])) * (0.5 * h);
            m.lu().solve(&r).unwrap()
        } else {
            let ep = ek + &f0 * h;
            ek + (f0 + rhs(&ep, &z[k + 1])) * (0.5 * h)
        };
        e.push(next);
    }
    let n = times.len();
    TeacherWindow {
        e_hat: e.iter().map(|v| v.as_slice().to_vec()).collect(),
        z,
        weights: vec![1.0; n],
        times,
    }
}

fn linear_problem(windows: Vec<TeacherWindow>) -> Problem {
    Problem {
        windows: windows.into_iter().map(Window::Teacher).collect(),
        selector: FeatureSelector::default(),
        n_state: 0,
    }
}

fn true_map() -> (DMatrix<f64>, DMatrix<f64>) {
    (
        DMatrix::from_row_slice(2, 2, &[-0.8, 1.5, -1.2, -0.4]),
        DMatrix::from_row_slice(2, 2, &[0.5, -0.3, 0.2, 0.9]),
    )
}

fn linear_net() -> NeuralEquivalence {
    let mut m = NeuralEquivalence::new(vec![4, 2], Activation::Tanh, false, 0, meta()).unwrap();
    m.theta.iter_mut().for_each(|t| *t = 0.0);
    m
}

fn map_error(m: &NeuralEquivalence) -> f64 {
    let (a, b) = true_map();
    let mut worst: f64 = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            worst = worst.max((m.theta[r * 4 + c] - a[(r, c)]).abs());
            worst = worst.max((m.theta[r * 4 + 2 + c] - b[(r, c)]).abs());
        }
        worst = worst.max(m.theta[8 + r].abs());
    }
    worst
}

#[test]
fn continuous_training_identifies_linear_map() {
    let (a, b) = true_map();
    let problem = linear_problem((0..3).map(|k| linear_data(&a, &b, 0.02, 4.0, k as f64, false)).collect());
    let cfg = TrainConfig {
        lr: 0.02,
        max_iters: 4000,
        tol: 0.0,
        ..TrainConfig::default()
    };
    let mut model = linear_net();
    let report = train_windows(&mut model, &problem, &cfg, LossVariant::ExOnly).unwrap();
    assert!(report.best_loss < 1e-6, "{}", report.best_loss);
    assert!(map_error(&model) < 1e-3, "{}", map_error(&model));
}

#[test]
fn sgd_decreases_loss_monotonically() {
    let (a, b) = true_map();
    let problem = linear_problem(vec![linear_data(&a, &b, 0.02, 2.0, 0.5, false)]);
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        lr: 1e-3,
        max_iters: 50,
        tol: 0.0,
        ..TrainConfig::default()
    };
    let mut model = linear_net();
    let report = train_windows(&mut model, &problem, &cfg, LossVariant::ExOnly).unwrap();
    assert!(report.loss_history.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn discrete_baseline_is_exact_on_trapezoidal_linear_data() {
    let (a, b) = true_map();
    let problem = linear_problem((0..3).map(|k| linear_data(&a, &b, 0.02, 4.0, k as f64, true)).collect());
    let mut model = linear_net();
    let cfg = TrainConfig {
        lr: 0.02,
        max_iters: 6000,
        tol: 0.0,
        ..TrainConfig::default()
    };
    let report = train_discrete_problem(&mut model, &problem, &cfg).unwrap();
    assert!(report.best_loss < 1e-12, "{}", report.best_loss);
    assert!(map_error(&model) < 1e-6, "{}", map_error(&model));
    // constant data: a zero net is optimal
    let flat = TeacherWindow {
        times: grid_times(0.1, 0.01),
        z: vec![vec![0.3, 0.1]; 11],
        e_hat: vec![vec![1.0, 2.0]; 11],
        weights: vec![1.0; 11],
    };
    let (loss, grad) = discrete_loss(&linear_net(), &linear_problem(vec![flat]));
    assert_eq!(loss, 0.0);
    assert!(grad.iter().all(|&g| g == 0.0));
}

#[test]
fn zero_iterations_and_reproducibility() {
    let c = case("two-area-4m", 3);
    let cfg = TrainConfig {
        arch: vec![4],
        max_iters: 0,
        ..check_cfg()
    };
    let r0 = train_pi_neudye(&c.grid, &c.partition, &c.samples, &cfg).unwrap();
    let sel = cfg.selector(&c.grid, &c.partition).unwrap();
    let problem = Problem::closed_loop(&c.grid, &c.partition, &c.samples, &sel, &cfg).unwrap();
    let fresh = initial_model(&problem, 4, &cfg, meta()).unwrap();
    assert_eq!(r0.model.theta, fresh.theta);
    assert_eq!(r0.iterations, 0);
    let cfg = TrainConfig { max_iters: 5, ..cfg };
    let a = train_pi_neudye(&c.grid, &c.partition, &c.samples, &cfg).unwrap();
    let b = train_pi_neudye(&c.grid, &c.partition, &c.samples, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.loss_history, b.loss_history);
    assert!(a.loss_history.iter().all(|l| l.is_finite() && *l >= 0.0));
}

#[test]
fn dataset_step_must_match_config() {
    let c = case("two-area-4m", 3);
    let cfg = TrainConfig {
        dt: 0.005,
        ..check_cfg()
    };
    let sel = FeatureSelector::ports(&c.partition);
    assert!(Problem::closed_loop(&c.grid, &c.partition, &c.samples, &sel, &cfg).is_err());
}
