use neudye::evaluation::generate_scenarios;
use neudye::fixtures;
use neudye::grid::{make_partition, GridModel, Partition};
use neudye::neuralnet::NeuralEquivalence;
use neudye::simulator::{simulate_full, simulate_hybrid_pi, SimConfig};
use neudye::training::{train_pi_neudye, Sample, TrainConfig};

const TIES: [&str; 4] = ["tie1.i.re", "tie1.i.im", "tie2.i.re", "tie2.i.im"];

fn trained(anchor: bool) -> (NeuralEquivalence, GridModel, Partition) {
    let (g, internal) = fixtures::two_area_4m();
    let p = make_partition(&g, &internal).unwrap();
    let set = generate_scenarios(&[3, 5], 0.5, 0.53, 0.6, 2, 3).unwrap();
    let sim = SimConfig { t_end: 1.5, ..SimConfig::default() };
    let data: Vec<Sample> = set
        .scenarios
        .iter()
        .map(|s| Sample {
            trajectory: simulate_full(&g, Some(s), &sim, Some(&p)).unwrap(),
            scenario: Some(s.clone()),
        })
        .collect();
    let cfg = TrainConfig { max_iters: 15, arch: vec![8], lr: 1e-2, window_s: 1.0, anchor, ..TrainConfig::default() };
    let model = train_pi_neudye(&g, &p, &data, &cfg).unwrap().model;
    (model, g, p)
}

/// Largest tie-current departure from the initial value over an
/// undisturbed run.
fn drift(anchor: bool) -> f64 {
    let (model, g, p) = trained(anchor);
    let sim = SimConfig { t_end: 5.0, ..SimConfig::default() };
    let run = simulate_hybrid_pi(&g, &p, &model, None, &sim).unwrap();
    TIES.iter()
        .map(|name| {
            let c = run.column(name).unwrap();
            c.iter().map(|v| (v - c[0]).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

#[test]
fn trained_equivalent_keeps_the_operating_point() {
    assert!(drift(true) < 1e-8);
    // without the anchor the trained net moves off the operating point
    assert!(drift(false) > 1e-6);
}

#[test]
fn models_without_anchor_field_still_load() {
    let (model, _, _) = trained(true);
    assert!(model.anchor.is_some());
    let mut v: serde_json::Value = serde_json::to_value(&model).unwrap();
    v.as_object_mut().unwrap().remove("anchor");
    let back = NeuralEquivalence::from_json(&v.to_string()).unwrap();
    assert!(back.anchor.is_none());
    assert_eq!(back.theta, model.theta);
}
