use cbm_core::data::{generate_linear_gaussian, ConceptKind, ConceptSchema, Dataset, LabeledExample, Split, Task};
use cbm_core::models::{Architecture, Model};
use cbm_core::numerics::{least_squares_fit, mean, sample_sd, Matrix, RandomSource};
use cbm_core::theory::LinearSetting;
use cbm_core::training::{
    concept_metrics, evaluate, train, train_joint, OptimizerConfig, RegimeConfig, StoppingMetric, TrainConfig,
};

struct Splits {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

fn linear_splits(seed: u64, d: usize, k: usize, sc: f64, sy: f64, n: usize) -> Splits {
    let mut rng = RandomSource::new(seed);
    let s = LinearSetting::random(d, k, 1.0, sc, sy, &mut rng).unwrap();
    Splits {
        train: generate_linear_gaussian(&s, n, &mut rng).unwrap(),
        val: generate_linear_gaussian(&s, n / 2, &mut rng).unwrap().with_split(Split::Val),
        test: generate_linear_gaussian(&s, n, &mut rng).unwrap().with_split(Split::Test),
    }
}

fn config(regime: RegimeConfig, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::regression_preset(regime).with_seed(seed);
    cfg.optimizer = OptimizerConfig::adam(0.002).with_decay(0.5, 10);
    cfg.epochs = 30;
    cfg.batch_size = 32;
    cfg
}

fn linear_architecture() -> Architecture {
    Architecture {
        concept_hidden: vec![],
        target_hidden: Some(vec![]),
        ..Architecture::default()
    }
}

fn fit_eval(s: &Splits, cfg: &TrainConfig) -> cbm_core::training::Metrics {
    let t = train(&s.train, &s.val, cfg).unwrap();
    evaluate(&t.model, &s.test).unwrap()
}

#[test]
fn noiseless_independent_error_vanishes_with_data() {
    let small = linear_splits(0, 10, 3, 0.0, 0.0, 200);
    let large = linear_splits(0, 10, 3, 0.0, 0.0, 5000);
    let cfg = config(RegimeConfig::Independent, 0);
    let small_err = fit_eval(&small, &cfg).task_error;
    let large_err = fit_eval(&large, &cfg).task_error;
    assert!(large_err <= 0.05, "rmse {large_err}");
    assert!(large_err < small_err);
}

#[test]
fn linear_target_stage_equals_least_squares() {
    let s = linear_splits(1, 6, 3, 0.3, 0.3, 400);
    let mut cfg = config(RegimeConfig::Independent, 1);
    cfg.architecture = linear_architecture();
    cfg.optimizer = OptimizerConfig::adam(0.05).with_decay(0.5, 50);
    cfg.batch_size = s.train.len();
    cfg.epochs = 400;
    cfg.early_stopping = StoppingMetric::None;
    let t = train(&s.train, &s.val, &cfg).unwrap();
    let Model::Bottleneck(m) = &t.model else { panic!("expected a bottleneck model") };
    // Oracle: ordinary least squares of y on [c, 1].
    let rows: Vec<Vec<f64>> = s.train.examples().iter().map(|e| [e.c.clone(), vec![1.0]].concat()).collect();
    let design = Matrix::from_rows(&rows).unwrap();
    let coef = least_squares_fit(&design, &Matrix::column_vector(&s.train.targets())).unwrap().into_vec();
    let layer = &m.f.layers()[0];
    for j in 0..3 {
        assert!((layer.weights[j] - coef[j]).abs() < 1e-6, "weight {j}: {} vs {}", layer.weights[j], coef[j]);
    }
    assert!((layer.bias[0] - coef[3]).abs() < 1e-6);
}

#[test]
fn sequential_beats_independent_when_concept_predictions_are_noisy() {
    let (mut seq, mut ind) = (Vec::new(), Vec::new());
    for seed in 0..20 {
        let s = linear_splits(seed, 20, 5, 0.5, 0.5, 100);
        seq.push(fit_eval(&s, &config(RegimeConfig::Sequential, seed)).task_error);
        ind.push(fit_eval(&s, &config(RegimeConfig::Independent, seed)).task_error);
    }
    assert!(mean(&seq) <= mean(&ind), "sequential {} independent {}", mean(&seq), mean(&ind));
}

#[test]
fn joint_limits_match_standard_and_sequential() {
    let s = linear_splits(3, 20, 5, 0.5, 0.5, 1000);
    let joint0 = train(&s.train, &s.val, &config(RegimeConfig::Joint { lambda: 0.0 }, 3)).unwrap();
    let standard = train(&s.train, &s.val, &config(RegimeConfig::Standard { bottleneck: true }, 3)).unwrap();
    let x = &s.test.examples()[0].x;
    let (Model::Bottleneck(j), Model::Standard(st)) = (&joint0.model, &standard.model) else { panic!() };
    let joint_params = [j.g.params(), j.f.params()].concat();
    let bits = |v: &[f64]| v.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&joint_params), bits(&st.net.params()));
    assert_eq!(bits(&joint0.model.forward_target(x).unwrap()), bits(&standard.model.forward_target(x).unwrap()));

    let big = fit_eval(&s, &config(RegimeConfig::Joint { lambda: 1e6 }, 3)).mean_concept_error.unwrap();
    let seq = fit_eval(&s, &config(RegimeConfig::Sequential, 3)).mean_concept_error.unwrap();
    assert!((big - seq).abs() <= 0.1 * seq, "joint {big} sequential {seq}");
}

#[test]
fn bottleneck_layer_does_not_change_standard_error_beyond_noise() {
    let mut diffs = Vec::new();
    for seed in 0..6 {
        let s = linear_splits(seed, 20, 5, 0.5, 0.5, 500);
        let with = fit_eval(&s, &config(RegimeConfig::Standard { bottleneck: true }, seed)).task_error;
        let without = fit_eval(&s, &config(RegimeConfig::Standard { bottleneck: false }, seed)).task_error;
        diffs.push(with - without);
    }
    assert!(mean(&diffs).abs() <= 2.0 * sample_sd(&diffs), "{diffs:?}");
}

#[test]
fn multitask_concept_head_improves_with_weight() {
    let grid = [0.0, 0.1, 1.0];
    let mut errs = [0.0; 3];
    for seed in 0..4 {
        let s = linear_splits(seed, 20, 5, 0.5, 0.5, 500);
        for (e, &l) in errs.iter_mut().zip(&grid) {
            *e += fit_eval(&s, &config(RegimeConfig::Multitask { lambda_mt: l }, seed)).mean_concept_error.unwrap();
        }
    }
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

#[test]
fn multitask_without_concept_weight_equals_standard() {
    let s = linear_splits(5, 8, 2, 0.5, 0.5, 200);
    let mt = train(&s.train, &s.val, &config(RegimeConfig::Multitask { lambda_mt: 0.0 }, 5)).unwrap();
    let st = train(&s.train, &s.val, &config(RegimeConfig::Standard { bottleneck: false }, 5)).unwrap();
    for e in s.test.examples() {
        assert_eq!(mt.model.forward_target(&e.x).unwrap(), st.model.forward_target(&e.x).unwrap());
    }
}

#[test]
fn constant_target_is_learned_exactly_by_the_bias() {
    let mut s = linear_splits(6, 4, 2, 0.3, 0.0, 200);
    let constant = |ds: &Dataset| {
        let ex = ds.examples().iter().map(|e| LabeledExample { y: 2.5, ..e.clone() }).collect();
        ds.with_examples(ex).unwrap()
    };
    s.train = constant(&s.train);
    s.val = constant(&s.val);
    s.test = constant(&s.test);
    let mut cfg = config(RegimeConfig::Joint { lambda: 1.0 }, 6);
    cfg.architecture = linear_architecture();
    cfg.optimizer = OptimizerConfig::sgd(0.05, 0.9);
    cfg.batch_size = s.train.len();
    cfg.epochs = 300;
    let err = fit_eval(&s, &cfg).task_error;
    assert!(err < 1e-3, "rmse {err}");
}

#[test]
fn full_batch_joint_objective_never_increases() {
    let s = linear_splits(7, 6, 2, 0.3, 0.3, 64);
    let mut cfg = config(RegimeConfig::Joint { lambda: 0.5 }, 7);
    cfg.architecture = linear_architecture();
    cfg.optimizer = OptimizerConfig::sgd(0.02, 0.0);
    cfg.batch_size = s.train.len();
    cfg.epochs = 50;
    cfg.early_stopping = StoppingMetric::None;
    let t = train_joint(&s.train, &s.val, &cfg).unwrap();
    for w in t.log.windows(2) {
        assert!(w[1].train_loss <= w[0].train_loss, "{} then {}", w[0].train_loss, w[1].train_loss);
    }
    assert!(t.log.last().unwrap().train_loss < t.log[0].train_loss);
}

#[test]
fn per_concept_errors_on_fixture() {
    let schema = ConceptSchema::uniform(3, ConceptKind::Continuous, "c");
    let ex = vec![
        LabeledExample::new(vec![0.0], vec![1.0, 0.0, 2.0], 0.0),
        LabeledExample::new(vec![0.0], vec![3.0, 1.0, 2.0], 0.0),
    ];
    let ds = Dataset::new(schema, Task::Regression, Split::Test, ex).unwrap();
    let preds = vec![vec![2.0, 0.0, 2.0], vec![3.0, 4.0, 2.0]];
    let (errs, _, _) = concept_metrics(&ds, &preds).unwrap();
    // Hand computed: sqrt(1/2), sqrt(9/2), 0.
    let expected = [0.5f64.sqrt(), 4.5f64.sqrt(), 0.0];
    for (e, x) in errs.iter().zip(expected) {
        assert!((e - x).abs() < 1e-15);
    }
    let m = mean(&errs);
    assert!((m - expected.iter().sum::<f64>() / 3.0).abs() < 1e-15);
}
