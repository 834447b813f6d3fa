use proptest::prelude::*;

use cbm_core::data::{
    filter_sparse_concepts, load_csv, majority_vote_concepts, save_csv, ConceptKind, ConceptSchema, Dataset,
    FilterMode, LabeledExample, Manifest, Split, Task,
};
use cbm_core::intervention::{compute_logit_percentiles, InterventionState, OracleEntry};
use cbm_core::models::{Activation, BottleneckModel, Connection, Mlp, Model, NetworkSpec, Regime};
use cbm_core::numerics::{random_orthonormal_columns, sample_gaussian_matrix, RandomSource};
use cbm_core::theory::{excess_error_ratio_limit, optimal_risk, risk_independent, risk_standard, LinearSetting};

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn random_dataset(seed: u64, n: usize, d: usize, k: usize, classification: bool, hidden: bool) -> Dataset {
    let mut rng = RandomSource::new(seed);
    let kind = if classification { ConceptKind::Binary } else { ConceptKind::Continuous };
    let mut schema = ConceptSchema::uniform(k, kind, "c");
    schema.visibility_aware = hidden;
    let examples = (0..n)
        .map(|_| {
            let x = (0..d).map(|_| rng.normal() * 10f64.powi(rng.index(7) as i32 - 3)).collect();
            let c = (0..k)
                .map(|_| if classification { f64::from(rng.bernoulli(0.5)) } else { rng.normal() })
                .collect();
            let y = if classification { rng.index(3) as f64 } else { rng.normal() };
            let mut e = LabeledExample::new(x, c, y);
            if hidden {
                e.visibility = (0..k).map(|_| rng.bernoulli(0.8)).collect();
            }
            e
        })
        .collect();
    let task = if classification { Task::Classification { n_classes: 3 } } else { Task::Regression };
    Dataset::new(schema, task, Split::Train, examples).unwrap()
}

fn random_bottleneck(seed: u64, d: usize, k: usize, connection: Connection) -> BottleneckModel {
    let task = match connection {
        Connection::Raw => Task::Regression,
        _ => Task::Classification { n_classes: 3 },
    };
    let g = Mlp::new(&NetworkSpec::mlp(d, &[6], k, Activation::Relu, seed)).unwrap();
    let f = Mlp::new(&NetworkSpec::mlp(k, &[5], task.output_width(), Activation::Sigmoid, seed + 1)).unwrap();
    BottleneckModel::new(g, f, connection, Regime::Joint { lambda: 0.5 }, task).unwrap()
}

fn connection_strategy() -> impl Strategy<Value = Connection> {
    prop_oneof![Just(Connection::Raw), Just(Connection::Logits), Just(Connection::Probabilities)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_value_identical(
        seed in any::<u64>(), n in 1usize..20, d in 1usize..5, k in 1usize..4,
        classification in any::<bool>(), hidden in any::<bool>(),
    ) {
        let ds = random_dataset(seed, n, d, k, classification, hidden);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path, &Manifest::for_dataset(&ds), Split::Train).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn orthonormal_columns_for_any_seed(seed in any::<u64>(), d in 1usize..12, frac in 0.0f64..1.0) {
        let k = 1 + ((d - 1) as f64 * frac) as usize;
        let b = random_orthonormal_columns(d, k, &mut RandomSource::new(seed)).unwrap();
        let gram = b.gram();
        for i in 0..k {
            for j in 0..k {
                let target = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram[(i, j)] - target).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn risks_monotone_and_above_optimum(
        seed in any::<u64>(), d in 2usize..15, frac in 0.0f64..1.0,
        sx in 0.1f64..3.0, sc in 0.0f64..2.0, sy in 0.0f64..2.0, n in 0usize..200,
    ) {
        let k = 1 + ((d - 1) as f64 * frac) as usize;
        let s = LinearSetting::random(d, k, sx, sc, sy, &mut RandomSource::new(seed)).unwrap();
        let n = n + d + 2;
        let opt = optimal_risk(&s);
        let std_n = risk_standard(&s, n).unwrap();
        prop_assert!(std_n >= opt);
        prop_assert!(risk_standard(&s, n + 1).unwrap() <= std_n);
        let ind = risk_independent(&s, n, n).unwrap();
        prop_assert!(ind >= opt);
        prop_assert!(risk_independent(&s, n + 1, n).unwrap() <= ind);
        prop_assert!(risk_independent(&s, n, n + 1).unwrap() <= ind);
    }

    #[test]
    fn majority_vote_idempotent_and_filter_preserves_x(seed in any::<u64>(), n in 4usize..30, k in 1usize..5) {
        let ds = random_dataset(seed, n, 2, k, true, false);
        let once = majority_vote_concepts(&ds).unwrap();
        prop_assert_eq!(majority_vote_concepts(&once).unwrap(), once);
        if let Ok(out) = filter_sparse_concepts(&ds, FilterMode::instance()) {
            prop_assert_eq!(out.dataset.len(), ds.len());
            for (a, b) in out.dataset.examples().iter().zip(ds.examples()) {
                prop_assert_eq!(&a.x, &b.x);
                prop_assert_eq!(a.y, b.y);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact(seed in any::<u64>(), d in 1usize..6, k in 1usize..4, conn in connection_strategy()) {
        let model = Model::Bottleneck(random_bottleneck(seed, d, k, conn));
        let back = Model::from_json(&model.to_json().unwrap()).unwrap();
        let (Model::Bottleneck(a), Model::Bottleneck(b)) = (&model, &back) else { unreachable!() };
        prop_assert_eq!(bits(&a.g.params()), bits(&b.g.params()));
        prop_assert_eq!(bits(&a.f.params()), bits(&b.f.params()));
        prop_assert_eq!(back, model);
    }

    #[test]
    fn target_factors_through_concepts(seed in any::<u64>(), conn in connection_strategy()) {
        let m = random_bottleneck(seed, 4, 3, conn);
        let mut rng = RandomSource::new(seed ^ 0xabc);
        let x1: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let x2: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let c1 = m.forward_concepts(&x1).unwrap();
        let via_concepts = m.predict_from_concepts(&m.connection.connect(&c1)).unwrap();
        prop_assert_eq!(bits(&via_concepts), bits(&m.forward_target(&x1).unwrap()));
        // Injecting x1's concepts while the input is x2 gives x1's prediction.
        let mut state = InterventionState::new(&m, &x2).unwrap();
        let injected: Vec<(usize, f64)> = m.connection.connect(&c1).into_iter().enumerate().collect();
        state.set(&m, &injected).unwrap();
        prop_assert_eq!(bits(&state.prediction), bits(&via_concepts));
        if conn == Connection::Probabilities {
            prop_assert!(m.target_input(&x2).unwrap().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn own_prediction_replacement_is_noop(seed in any::<u64>(), conn in connection_strategy(), j in 0usize..3) {
        let m = random_bottleneck(seed, 4, 3, conn);
        let x: Vec<f64> = {
            let mut rng = RandomSource::new(seed.wrapping_add(7));
            (0..4).map(|_| rng.normal()).collect()
        };
        let before = InterventionState::new(&m, &x).unwrap();
        let mut after = before.clone();
        after.set(&m, &[(j, before.f_input[j])]).unwrap();
        prop_assert_eq!(bits(&after.prediction), bits(&before.prediction));
        if conn == Connection::Raw {
            let entry = OracleEntry { c: m.forward_concepts(&x).unwrap(), visibility: vec![true; 3] };
            let mut oracle_state = before.clone();
            oracle_state.apply_oracle(&m, &[0, 1, 2], &entry, None).unwrap();
            prop_assert_eq!(bits(&oracle_state.prediction), bits(&before.prediction));
        }
    }

    #[test]
    fn percentiles_do_not_depend_on_order(seed in any::<u64>(), n in 1usize..60) {
        let model = Model::Bottleneck(random_bottleneck(seed, 2, 3, Connection::Logits));
        let ds = random_dataset(seed, n, 2, 3, true, false);
        let mut order: Vec<usize> = (0..n).collect();
        RandomSource::new(seed ^ 1).shuffle(&mut order);
        let shuffled = ds.subset(&order);
        let a = compute_logit_percentiles(&model, &ds, 0.05, 0.95).unwrap();
        let b = compute_logit_percentiles(&model, &shuffled, 0.05, 0.95).unwrap();
        for j in 0..3 {
            prop_assert!(a.low[j] <= a.high[j]);
        }
        prop_assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_bit_reproducible(seed in any::<u64>(), rows in 1usize..10, cols in 1usize..10, sd in 0.0f64..5.0) {
        let a = sample_gaussian_matrix(rows, cols, sd, &mut RandomSource::new(seed));
        let b = sample_gaussian_matrix(rows, cols, sd, &mut RandomSource::new(seed));
        prop_assert_eq!(bits(a.as_slice()), bits(b.as_slice()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ratio_limit_never_exceeds_bound(
        seed in any::<u64>(), d in 1usize..60, frac in 0.0f64..1.0,
        sx in 0.01f64..5.0, sc in 0.0f64..5.0, sy in 0.0f64..5.0,
    ) {
        prop_assume!(sc > 0.0 || sy > 0.0);
        let k = 1 + ((d - 1) as f64 * frac) as usize;
        let s = LinearSetting::random(d, k, sx, sc, sy, &mut RandomSource::new(seed)).unwrap();
        let lim = excess_error_ratio_limit(&s).unwrap();
        prop_assert!(lim.exact <= lim.bound + 1e-12, "{lim:?}");
    }
}
