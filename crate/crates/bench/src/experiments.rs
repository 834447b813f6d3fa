//! Experiment runners. Each returns a self-describing [`Report`] whose
//! content depends only on the resolved config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cbm_core::data::subsample;
use cbm_core::intervention::{
    compute_logit_percentiles, greedy_validation_ordering, intervention_curve, Oracle, Policy,
};
use cbm_core::models::{Connection, Model};
use cbm_core::numerics::RandomSource;
use cbm_core::probes::probe_report;
use cbm_core::theory::{save_sweep_csv, sweep_row, LinearSetting, SweepRow};
use cbm_core::training::{evaluate, train, Metrics, RegimeConfig, Trained};
use cbm_core::CbmError;

use crate::config::{ExperimentConfig, RosterEntry};
use crate::data::{materialize, write_seed_data, SeedData};
use crate::report::Stat;
use crate::{BenchError, Result};

const SUBSAMPLE_STREAM: u64 = 2;

/// A training or evaluation error for one roster entry and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub entry: String,
    pub seed: u64,
    pub error: String,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub experiment: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub results: T,
    pub failures: Vec<Failure>,
}

impl<T> Report<T> {
    fn new(experiment: &str, config: &ExperimentConfig, results: T, failures: Vec<Failure>) -> Self {
        Self {
            experiment: experiment.into(),
            config: config.clone(),
            seeds: config.seeds.clone(),
            results,
            failures,
        }
    }

    pub fn diverged(&self) -> bool {
        self.failures.iter().any(|f| f.diverged)
    }
}

fn record(failures: &mut Vec<Failure>, entry: &str, seed: u64, e: &CbmError) {
    failures.push(Failure {
        entry: entry.into(),
        seed,
        error: e.to_string(),
        diverged: matches!(e, CbmError::TrainingDiverged { .. }),
    });
}

fn fit(entry: &RosterEntry, data: &SeedData, seed: u64) -> std::result::Result<Trained<Model>, CbmError> {
    train(&data.train, &data.val, &entry.train.clone().with_seed(seed))
}

fn seed_data(cfg: &ExperimentConfig) -> Result<Vec<(u64, SeedData)>> {
    let source = cfg.validate_training()?;
    cfg.seeds.iter().map(|&s| Ok((s, materialize(source, s)?))).collect()
}

fn stat_opt(values: &[Option<f64>]) -> Option<Stat> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.len() == values.len() {
        Stat::of(&present)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub train_task_error: f64,
    pub task_error: f64,
    pub concept_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RosterRow {
    pub name: String,
    pub regime: RegimeConfig,
    pub train_task_error: Option<Stat>,
    pub task_error: Option<Stat>,
    pub concept_error: Option<Stat>,
    pub per_seed: Vec<SeedScore>,
}

fn summarize(name: &str, regime: RegimeConfig, per_seed: Vec<SeedScore>) -> RosterRow {
    let task: Vec<f64> = per_seed.iter().map(|s| s.task_error).collect();
    let train_task: Vec<f64> = per_seed.iter().map(|s| s.train_task_error).collect();
    let concept: Vec<Option<f64>> = per_seed.iter().map(|s| s.concept_error).collect();
    RosterRow {
        name: name.into(),
        regime,
        train_task_error: Stat::of(&train_task),
        task_error: Stat::of(&task),
        concept_error: stat_opt(&concept),
        per_seed,
    }
}

fn score(seed: u64, train_error: f64, m: &Metrics) -> SeedScore {
    SeedScore {
        seed,
        train_task_error: train_error,
        task_error: m.task_error,
        concept_error: m.mean_concept_error,
    }
}

/// Trains every roster entry on every seed and reports test errors. With
/// `models_dir`, each trained model is saved as `<name>-seed<seed>.json`.
pub fn run_roster(cfg: &ExperimentConfig, models_dir: Option<&Path>) -> Result<Report<Vec<RosterRow>>> {
    let data = seed_data(cfg)?;
    let mut failures = Vec::new();
    let mut per_entry: Vec<Vec<SeedScore>> = vec![Vec::new(); cfg.roster.len()];
    for (seed, d) in &data {
        for (entry, scores) in cfg.roster.iter().zip(per_entry.iter_mut()) {
            let outcome = fit(entry, d, *seed).and_then(|t| {
                if let Some(dir) = models_dir {
                    std::fs::create_dir_all(dir)?;
                    t.model.save(&dir.join(format!("{}-seed{seed}.json", entry.name)))?;
                }
                Ok((evaluate(&t.model, &d.train)?.task_error, evaluate(&t.model, &d.test)?))
            });
            match outcome {
                Ok((tr, m)) => scores.push(score(*seed, tr, &m)),
                Err(e) => record(&mut failures, &entry.name, *seed, &e),
            }
        }
    }
    let rows = cfg
        .roster
        .iter()
        .zip(per_entry)
        .map(|(e, s)| summarize(&e.name, e.train.regime, s))
        .collect();
    Ok(Report::new("roster", cfg, rows, failures))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataEfficiencyCurve {
    pub name: String,
    pub points: Vec<DataEfficiencyPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataEfficiencyPoint {
    pub fraction: f64,
    pub row: RosterRow,
}

/// Retrains on `⌈fraction·n⌉` of the training and validation data. A fraction
/// of 1 keeps the full splits, so it reproduces the roster.
pub fn run_data_efficiency(cfg: &ExperimentConfig) -> Result<Report<Vec<DataEfficiencyCurve>>> {
    let opts = &cfg.data_efficiency;
    if opts.fractions.is_empty() || opts.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(BenchError::Config("fractions must be non-empty and lie in (0, 1]".into()));
    }
    let data = seed_data(cfg)?;
    let mut failures = Vec::new();
    let mut scores = vec![vec![Vec::new(); opts.fractions.len()]; cfg.roster.len()];
    for (seed, d) in &data {
        for (fi, &fraction) in opts.fractions.iter().enumerate() {
            let mut rng = RandomSource::with_stream(*seed, SUBSAMPLE_STREAM);
            let sub = SeedData {
                train: subsample(&d.train, fraction, opts.stratified, &mut rng)?,
                val: subsample(&d.val, fraction, opts.stratified, &mut rng)?,
                test: d.test.clone(),
                shifted_test: None,
            };
            for (ei, entry) in cfg.roster.iter().enumerate() {
                let outcome = fit(entry, &sub, *seed)
                    .and_then(|t| Ok((evaluate(&t.model, &sub.train)?.task_error, evaluate(&t.model, &sub.test)?)));
                match outcome {
                    Ok((tr, m)) => scores[ei][fi].push(score(*seed, tr, &m)),
                    Err(e) => record(&mut failures, &format!("{}@{fraction}", entry.name), *seed, &e),
                }
            }
        }
    }
    let curves = cfg
        .roster
        .iter()
        .zip(scores)
        .map(|(entry, per_fraction)| DataEfficiencyCurve {
            name: entry.name.clone(),
            points: opts
                .fractions
                .iter()
                .zip(per_fraction)
                .map(|(&fraction, s)| DataEfficiencyPoint {
                    fraction,
                    row: summarize(&entry.name, entry.train.regime, s),
                })
                .collect(),
        })
        .collect();
    Ok(Report::new("data_efficiency", cfg, curves, failures))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub name: String,
    pub regime: RegimeConfig,
    pub unshifted: RosterRow,
    pub shifted: RosterRow,
}

/// Evaluates each trained model on the ordinary and the shifted test split.
pub fn run_shift(cfg: &ExperimentConfig) -> Result<Report<Vec<ShiftRow>>> {
    let data = seed_data(cfg)?;
    if data.iter().any(|(_, d)| d.shifted_test.is_none()) {
        return Err(BenchError::Config("shift needs a data source with a shifted test split".into()));
    }
    let mut failures = Vec::new();
    let mut plain = vec![Vec::new(); cfg.roster.len()];
    let mut moved = vec![Vec::new(); cfg.roster.len()];
    for (seed, d) in &data {
        let shifted = d.shifted_test.as_ref().expect("checked above");
        for (ei, entry) in cfg.roster.iter().enumerate() {
            let outcome = fit(entry, d, *seed).and_then(|t| {
                let tr = evaluate(&t.model, &d.train)?.task_error;
                Ok((tr, evaluate(&t.model, &d.test)?, evaluate(&t.model, shifted)?))
            });
            match outcome {
                Ok((tr, a, b)) => {
                    plain[ei].push(score(*seed, tr, &a));
                    moved[ei].push(score(*seed, tr, &b));
                }
                Err(e) => record(&mut failures, &entry.name, *seed, &e),
            }
        }
    }
    let rows = cfg
        .roster
        .iter()
        .zip(plain.into_iter().zip(moved))
        .map(|(e, (a, b))| ShiftRow {
            name: e.name.clone(),
            regime: e.train.regime,
            unshifted: summarize(&e.name, e.train.regime, a),
            shifted: summarize(&e.name, e.train.regime, b),
        })
        .collect();
    Ok(Report::new("shift", cfg, rows, failures))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOrdering {
    pub seed: u64,
    pub order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRow {
    pub name: String,
    pub regime: RegimeConfig,
    pub orderings: Vec<SeedOrdering>,
    /// Test concept error before any intervention.
    pub concept_error: Option<Stat>,
    /// Error after `t` concepts, `t = 0..=K`, in greedy order.
    pub greedy: Vec<Stat>,
    /// Error after `t` concept groups in random order.
    pub random: Vec<Stat>,
    /// Paired per-seed `greedy − random`; present when every group is a
    /// single concept, so both curves index the same `t`.
    pub greedy_minus_random: Option<Vec<Stat>>,
}

/// Seed, greedy order, greedy curve, random curve, concept error.
type SeedCurves = (u64, Vec<usize>, Vec<f64>, Vec<f64>, Option<f64>);

fn pointwise(curves: &[&[f64]]) -> Vec<Stat> {
    let len = curves.iter().map(|c| c.len()).min().unwrap_or(0);
    (0..len)
        .filter_map(|t| Stat::of(&curves.iter().map(|c| c[t]).collect::<Vec<_>>()))
        .collect()
}

/// Error curves for two policies per bottleneck entry: concepts in the greedy
/// validation order, and concept groups in a random order drawn from the seed.
pub fn run_intervention(cfg: &ExperimentConfig) -> Result<Report<Vec<InterventionRow>>> {
    for e in &cfg.roster {
        if !matches!(
            e.train.regime,
            RegimeConfig::Independent | RegimeConfig::Sequential | RegimeConfig::Joint { .. }
        ) {
            return Err(BenchError::Config(format!("{} is not a bottleneck model", e.name)));
        }
    }
    let opts = &cfg.intervention;
    let data = seed_data(cfg)?;
    let mut failures = Vec::new();
    let mut per_entry: Vec<Vec<SeedCurves>> = vec![Vec::new(); cfg.roster.len()];
    for (seed, d) in &data {
        let oracle = Oracle::from_dataset(&d.test);
        for (ei, entry) in cfg.roster.iter().enumerate() {
            let outcome = fit(entry, d, *seed).and_then(|t| {
                let m = t.model.as_bottleneck()?;
                let percentiles = if m.connection == Connection::Logits {
                    Some(compute_logit_percentiles(&t.model, &d.train, opts.p_low, opts.p_high)?)
                } else {
                    None
                };
                let p = percentiles.as_ref();
                let order = greedy_validation_ordering(&t.model, &d.val, p)?;
                let greedy = intervention_curve(&t.model, &d.test, &oracle, &Policy::FixedOrder { order: order.clone() }, p)?;
                let random = intervention_curve(&t.model, &d.test, &oracle, &Policy::RandomGroup { seed: *seed }, p)?;
                let errs = |c: &cbm_core::intervention::InterventionCurve| c.points.iter().map(|p| p.task_error).collect();
                let concept = evaluate(&t.model, &d.test)?.mean_concept_error;
                Ok((*seed, order, errs(&greedy), errs(&random), concept))
            });
            match outcome {
                Ok(r) => per_entry[ei].push(r),
                Err(e) => record(&mut failures, &entry.name, *seed, &e),
            }
        }
    }
    let rows = cfg
        .roster
        .iter()
        .zip(per_entry)
        .map(|(entry, runs)| {
            let greedy: Vec<&[f64]> = runs.iter().map(|r| r.2.as_slice()).collect();
            let random: Vec<&[f64]> = runs.iter().map(|r| r.3.as_slice()).collect();
            let paired = runs.iter().all(|r| r.2.len() == r.3.len());
            let diffs: Vec<Vec<f64>> = runs
                .iter()
                .map(|r| r.2.iter().zip(&r.3).map(|(a, b)| a - b).collect())
                .collect();
            let diff_refs: Vec<&[f64]> = diffs.iter().map(Vec::as_slice).collect();
            InterventionRow {
                name: entry.name.clone(),
                regime: entry.train.regime,
                orderings: runs.iter().map(|r| SeedOrdering { seed: r.0, order: r.1.clone() }).collect(),
                concept_error: stat_opt(&runs.iter().map(|r| r.4).collect::<Vec<_>>()),
                greedy: pointwise(&greedy),
                random: pointwise(&random),
                greedy_minus_random: (paired && !runs.is_empty()).then(|| pointwise(&diff_refs)),
            }
        })
        .collect();
    Ok(Report::new("intervention", cfg, rows, failures))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub width: usize,
    pub val: Stat,
    pub test: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub name: String,
    pub regime: RegimeConfig,
    pub layers: Vec<LayerStats>,
    /// Layer chosen on validation data, per seed.
    pub best_layers: Vec<usize>,
    /// Test error of the chosen layer's probe.
    pub best_test: Option<Stat>,
    /// The model's own concept readout on test, when it has one.
    pub readout_concept_error: Option<Stat>,
}

/// Linear probes on every layer of every roster model.
pub fn run_probe(cfg: &ExperimentConfig) -> Result<Report<Vec<ProbeRow>>> {
    let data = seed_data(cfg)?;
    let mut failures = Vec::new();
    let mut rows = Vec::with_capacity(cfg.roster.len());
    let mut reports: Vec<Vec<(cbm_core::probes::ProbeReport, Option<f64>)>> = vec![Vec::new(); cfg.roster.len()];
    for (seed, d) in &data {
        for (ei, entry) in cfg.roster.iter().enumerate() {
            let outcome = fit(entry, d, *seed).and_then(|t| {
                let report = probe_report(&t.model, &d.train, &d.val, &d.test)?;
                Ok((report, evaluate(&t.model, &d.test)?.mean_concept_error))
            });
            match outcome {
                Ok(r) => reports[ei].push(r),
                Err(e) => record(&mut failures, &entry.name, *seed, &e),
            }
        }
    }
    for (entry, runs) in cfg.roster.iter().zip(reports) {
        let n_layers = runs.first().map_or(0, |r| r.0.layers.len());
        let layers = (0..n_layers)
            .filter_map(|l| {
                let val: Vec<f64> = runs.iter().map(|r| r.0.layers[l].val.mean).collect();
                let test: Vec<f64> = runs.iter().map(|r| r.0.layers[l].test.mean).collect();
                Some(LayerStats {
                    layer: l,
                    width: runs[0].0.layers[l].width,
                    val: Stat::of(&val)?,
                    test: Stat::of(&test)?,
                })
            })
            .collect();
        let best: Vec<f64> = runs.iter().map(|r| r.0.best_test.mean).collect();
        let readout: Vec<Option<f64>> = runs.iter().map(|r| r.1).collect();
        rows.push(ProbeRow {
            name: entry.name.clone(),
            regime: entry.train.regime,
            layers,
            best_layers: runs.iter().map(|r| r.0.best_layer).collect(),
            best_test: Stat::of(&best),
            readout_concept_error: stat_opt(&readout),
        });
    }
    Ok(Report::new("probe", cfg, rows, failures))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub seed: u64,
    pub setting: usize,
    #[serde(flatten)]
    pub row: SweepRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryResults {
    pub rows: Vec<TheoryRow>,
    pub exact_le_bound: bool,
}

/// Closed-form and Monte Carlo risks for each (seed, setting, n). Seed `s`
/// draws the setting's `B` and `b` from `RandomSource::new(s)` and seeds the
/// trials with `s`.
pub fn run_theory(cfg: &ExperimentConfig, csv_path: Option<&Path>) -> Result<Report<TheoryResults>> {
    cfg.validate_theory()?;
    let t = &cfg.theory;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for (si, spec) in t.settings.iter().enumerate() {
            let s = LinearSetting::random(spec.d, spec.k, spec.sigma_x, spec.sigma_c, spec.sigma_y, &mut RandomSource::new(seed))
                .map_err(|e| BenchError::Config(format!("setting {si}: {e}")))?;
            for &n in &t.n {
                rows.push(TheoryRow {
                    seed,
                    setting: si,
                    row: sweep_row(&s, n, t.trials, seed)?,
                });
            }
        }
    }
    if let Some(path) = csv_path {
        let plain: Vec<SweepRow> = rows.iter().map(|r| r.row.clone()).collect();
        save_sweep_csv(&plain, path)?;
    }
    let exact_le_bound = rows.iter().all(|r| r.row.ratio_limit <= r.row.ratio_bound + 1e-12);
    Ok(Report::new("theory", cfg, TheoryResults { rows, exact_le_bound }, Vec::new()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSeed {
    pub seed: u64,
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// Writes each seed's splits under `<out>/seed-<seed>/`. Directories in the
/// report are relative to `out`.
pub fn run_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Report<Vec<GeneratedSeed>>> {
    let source = cfg.validate_data_only()?;
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let d = materialize(source, seed)?;
        let rel = PathBuf::from(format!("seed-{seed}"));
        let files = write_seed_data(&d, &out.join(&rel))?;
        seeds.push(GeneratedSeed {
            seed,
            dir: rel,
            files,
            n_train: d.train.len(),
            n_val: d.val.len(),
            n_test: d.test.len(),
        });
    }
    Ok(Report::new("gen_data", cfg, seeds, Vec::new()))
}
