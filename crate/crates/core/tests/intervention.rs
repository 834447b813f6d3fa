use cbm_core::data::{generate_linear_gaussian, generate_species_task, species_world, Dataset, ShiftConfig, Split};
use cbm_core::intervention::{
    compute_logit_percentiles, greedy_validation_ordering, intervene_classification, intervene_regression,
    intervention_curve, InterventionState, InterventionTrace, Oracle, OracleEntry, Policy, Target, TraceStep,
};
use cbm_core::models::{Connection, Model};
use cbm_core::numerics::{mean, RandomSource};
use cbm_core::theory::LinearSetting;
use cbm_core::training::{evaluate, train, OptimizerConfig, RegimeConfig, TrainConfig};

fn linear_splits(seed: u64, k: usize, n: usize) -> (Dataset, Dataset, Dataset) {
    let mut rng = RandomSource::new(seed);
    let s = LinearSetting::random(12, k, 1.0, 0.5, 0.3, &mut rng).unwrap();
    let tr = generate_linear_gaussian(&s, n, &mut rng).unwrap();
    let va = generate_linear_gaussian(&s, n / 2, &mut rng).unwrap().with_split(Split::Val);
    let te = generate_linear_gaussian(&s, n, &mut rng).unwrap().with_split(Split::Test);
    (tr, va, te)
}

fn regression_config(regime: RegimeConfig, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::regression_preset(regime).with_seed(seed);
    cfg.optimizer = OptimizerConfig::adam(0.003).with_decay(0.5, 10);
    cfg.epochs = 20;
    cfg.batch_size = 32;
    cfg
}

fn independent(seed: u64, k: usize, n: usize) -> (Model, Dataset, Dataset, Dataset) {
    let (tr, va, te) = linear_splits(seed, k, n);
    let t = train(&tr, &va, &regression_config(RegimeConfig::Independent, seed)).unwrap();
    (t.model, tr, va, te)
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn full_intervention_returns_f_of_true_concepts() {
    let (model, _, _, te) = independent(1, 3, 300);
    let m = model.as_bottleneck().unwrap();
    for e in te.examples().iter().take(20) {
        let entry = OracleEntry { c: e.c.clone(), visibility: e.visibility.clone() };
        let (edited, pred) = intervene_regression(&model, &e.x, &[2, 0, 1], &entry).unwrap();
        assert_eq!(edited, e.c);
        assert_eq!(bits(&pred), bits(&m.predict_from_concepts(&e.c).unwrap()));
    }
}

#[test]
fn full_intervention_lowers_mean_squared_error() {
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for seed in 0..20 {
        let (model, _, _, te) = independent(seed, 3, 300);
        let curve = intervention_curve(&model, &te, &Oracle::from_dataset(&te), &Policy::FixedOrder { order: vec![0, 1, 2] }, None)
            .unwrap();
        before.push(curve.points[0].task_error.powi(2));
        after.push(curve.points[3].task_error.powi(2));
    }
    assert!(mean(&after) <= mean(&before), "{} vs {}", mean(&after), mean(&before));
}

fn species_config() -> ShiftConfig {
    ShiftConfig {
        n_classes: 6,
        n_concepts: 6,
        d_signal: 8,
        d_background: 4,
        concept_noise: 0.0,
        background_strength: 1.0,
        signal_noise: 0.5,
        concepts_per_group: 2,
        mapping_seed: 11,
    }
}

#[test]
fn probability_model_with_all_groups_revealed_reads_the_signature() {
    let cfg = species_config();
    let world = species_world(&cfg).unwrap();
    let mut rng = RandomSource::new(4);
    let tr = generate_species_task(&cfg, 20, false, &mut rng).unwrap();
    let va = generate_species_task(&cfg, 5, false, &mut rng).unwrap().with_split(Split::Val);
    let te = generate_species_task(&cfg, 5, false, &mut rng).unwrap().with_split(Split::Test);
    let mut tc = TrainConfig::classification_preset(RegimeConfig::Sequential).with_seed(4);
    tc.connection = Some(Connection::Probabilities);
    tc.epochs = 10;
    let model = train(&tr, &va, &tc).unwrap().model;
    let m = model.as_bottleneck().unwrap();
    assert_eq!(m.connection, Connection::Probabilities);
    let groups = te.schema().groups();
    let all: Vec<usize> = groups.keys().copied().collect();
    for e in te.examples() {
        let entry = OracleEntry { c: e.c.clone(), visibility: e.visibility.clone() };
        let (input, pred) = intervene_classification(&model, &e.x, &all, &groups, &entry, None).unwrap();
        let signature = &world.signatures[e.label()];
        assert_eq!(&input, signature);
        assert_eq!(bits(&pred), bits(&m.predict_from_concepts(signature).unwrap()));
    }
}

#[test]
fn logit_interventions_write_percentiles() {
    let cfg = species_config();
    let mut rng = RandomSource::new(5);
    let tr = generate_species_task(&cfg, 20, false, &mut rng).unwrap();
    let va = generate_species_task(&cfg, 5, false, &mut rng).unwrap().with_split(Split::Val);
    let mut tc = TrainConfig::classification_preset(RegimeConfig::Joint { lambda: 1.0 }).with_seed(5);
    tc.epochs = 5;
    let model = train(&tr, &va, &tc).unwrap().model;
    let p = compute_logit_percentiles(&model, &tr, 0.05, 0.95).unwrap();
    let e = &va.examples()[0];
    let entry = OracleEntry { c: e.c.clone(), visibility: e.visibility.clone() };
    let groups = va.schema().groups();
    let (input, _) = intervene_classification(&model, &e.x, &[0], &groups, &entry, Some(&p)).unwrap();
    for j in groups[&0].iter().copied() {
        let expected = if e.c[j] == 1.0 { p.high[j] } else { p.low[j] };
        assert_eq!(input[j], expected);
    }
    assert!(intervene_classification(&model, &e.x, &[0], &groups, &entry, None).is_err());
    assert!(intervene_classification(&model, &e.x, &[99], &groups, &entry, Some(&p)).is_err());
}

#[test]
fn greedy_ordering_puts_corrupted_concept_first() {
    let (mut model, _, va, _) = independent(7, 2, 400);
    let Model::Bottleneck(m) = &mut model else { panic!() };
    let last = m.g.layers_mut().last_mut().unwrap();
    let out = last.output;
    for i in 0..last.input {
        last.weights[i * out] = 0.0;
    }
    last.bias[0] = 3.0;
    assert_eq!(greedy_validation_ordering(&model, &va, None).unwrap(), vec![0, 1]);
}

#[test]
fn curve_starts_at_model_error_and_is_deterministic() {
    let (model, _, va, te) = independent(8, 4, 300);
    let oracle = Oracle::from_dataset(&te);
    let order = greedy_validation_ordering(&model, &va, None).unwrap();
    let fixed = intervention_curve(&model, &te, &oracle, &Policy::FixedOrder { order: order.clone() }, None).unwrap();
    let base = evaluate(&model, &te).unwrap().task_error;
    assert_eq!(fixed.points[0].task_error.to_bits(), base.to_bits());
    assert_eq!(fixed.points.len(), 5);
    let random = Policy::RandomGroup { seed: 3 };
    let a = intervention_curve(&model, &te, &oracle, &random, None).unwrap();
    let b = intervention_curve(&model, &te, &oracle, &random, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.seeds, vec![3]);
    // Both policies reveal everything at t = K.
    assert_eq!(a.points[4].task_error.to_bits(), fixed.points[4].task_error.to_bits());
}

#[test]
fn interleaved_traces_do_not_interact() {
    let (model, _, _, te) = independent(9, 3, 200);
    let m = model.as_bottleneck().unwrap();
    let ex = &te.examples()[..2];
    let run = |interleave: bool| -> Vec<InterventionTrace> {
        let mut states: Vec<InterventionState> = ex.iter().map(|e| InterventionState::new(m, &e.x).unwrap()).collect();
        let mut traces: Vec<InterventionTrace> =
            states.iter().enumerate().map(|(i, s)| InterventionTrace::new(i, s.prediction.clone())).collect();
        let mut schedule: Vec<(usize, usize)> = (0..2).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
        if interleave {
            schedule.sort_by_key(|&(i, j)| (j, i));
        }
        for (i, j) in schedule {
            let entry = OracleEntry { c: ex[i].c.clone(), visibility: ex[i].visibility.clone() };
            let imposed = states[i].apply_oracle(m, &[j], &entry, None).unwrap();
            traces[i].steps.push(TraceStep { target: Target::Concept(j), imposed, prediction: states[i].prediction.clone() });
        }
        traces
    };
    let (seq, inter) = (run(false), run(true));
    assert_eq!(seq, inter);
    for (t, e) in seq.iter().zip(ex) {
        let replayed = t.replay(m, &e.x).unwrap();
        let recorded: Vec<Vec<f64>> = t.steps.iter().map(|s| s.prediction.clone()).collect();
        assert_eq!(replayed, recorded);
    }
}
