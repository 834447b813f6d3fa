//! Losses, optimizers and the five training regimes: independent,
//! sequential and joint bottlenecks, the standard model, and the multitask
//! baseline.

mod gradcheck;
mod loss;
mod metrics;
mod objective;
mod optim;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Task};
use crate::error::{CbmError, Result};
use crate::models::{
    Architecture, BottleneckModel, Connection, Mlp, Model, MultitaskModel, Regime, StandardModel, TARGET_SEED_OFFSET,
};
use crate::numerics::RandomSource;

pub use gradcheck::{random_gradient_checks, GradientCheck};
pub use loss::{concept_loss, target_loss, ConceptLoss, LossSpec, TargetLoss};
pub use metrics::{concept_metrics, evaluate, pearson, predict_all, task_error, ConceptScore, Metrics};
pub use objective::{LossParts, Objective, Sample};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

/// Default joint-model λ values for the regression and classification presets.
pub const JOINT_LAMBDA_PRESETS: [f64; 2] = [1.0, 0.01];

/// Seed offset for the multitask concept head.
const CONCEPT_HEAD_SEED_OFFSET: u64 = 2;
/// RNG streams for minibatch order: the `x → c` / end-to-end stage and the
/// `c → y` stage of the two-stage regimes.
const MAIN_STREAM: u64 = 0;
const TARGET_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegimeConfig {
    Independent,
    Sequential,
    Joint {
        lambda: f64,
    },
    Standard {
        /// Keep a width-`k` layer between the `g`-shaped and `f`-shaped parts.
        #[serde(default)]
        bottleneck: bool,
    },
    Multitask {
        lambda_mt: f64,
    },
}

/// Validation quantity tracked for early stopping (lower is better).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingMetric {
    /// Task error, or mean concept error while fitting `g` alone.
    #[default]
    Error,
    /// The objective being minimized, evaluated on validation data.
    Loss,
    /// Keep the final epoch.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: RegimeConfig,
    #[serde(default)]
    pub architecture: Architecture,
    /// Bottleneck wiring for sequential and joint models; defaults to raw for
    /// regression and logits for classification.
    #[serde(default)]
    pub connection: Option<Connection>,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub early_stopping: StoppingMetric,
    #[serde(default)]
    pub seed: u64,
    /// Weight positive concept labels by the training imbalance ratio.
    #[serde(default = "default_true")]
    pub weighted_concept_loss: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// Adam (0.9, 0.999), halving every 10 epochs.
    pub fn regression_preset(regime: RegimeConfig) -> Self {
        Self {
            regime,
            architecture: Architecture::default(),
            connection: None,
            optimizer: OptimizerConfig::adam(5e-4).with_decay(0.5, 10),
            epochs: 30,
            batch_size: 8,
            early_stopping: StoppingMetric::Error,
            seed: 0,
            weighted_concept_loss: true,
        }
    }

    /// SGD with momentum 0.9, batch 64, learning rate cut tenfold every 20 epochs.
    pub fn classification_preset(regime: RegimeConfig) -> Self {
        Self {
            regime,
            architecture: Architecture::default(),
            connection: None,
            optimizer: OptimizerConfig::sgd(0.01, 0.9).with_decay(0.1, 20),
            epochs: 60,
            batch_size: 64,
            early_stopping: StoppingMetric::Error,
            seed: 0,
            weighted_concept_loss: true,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(CbmError::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(CbmError::InvalidConfig("epochs must be at least 1".into()));
        }
        match self.regime {
            RegimeConfig::Joint { lambda: l } | RegimeConfig::Multitask { lambda_mt: l } if !(l >= 0.0 && l.is_finite()) => {
                Err(CbmError::InvalidConfig(format!("λ must be a nonnegative number, got {l}")))
            }
            _ => Ok(()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// `x → c` alone.
    Concepts,
    /// `c → y` (or `ĉ → y`) alone.
    Target,
    /// All parameters at once.
    EndToEnd,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_target_loss: f64,
    pub train_concept_loss: f64,
    pub val_metric: f64,
    pub best: bool,
}

/// A trained model and its per-epoch log.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub log: Vec<EpochRecord>,
}

/// Writes the log as line-delimited JSON.
pub fn write_log<W: Write>(log: &[EpochRecord], mut w: W) -> Result<()> {
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn samples<'a>(ds: &'a Dataset, inputs: Option<&'a [Vec<f64>]>) -> Vec<Sample<'a>> {
    ds.examples()
        .iter()
        .enumerate()
        .map(|(i, e)| Sample {
            input: inputs.map_or(&e.x, |v| &v[i]),
            concepts: &e.c,
            y: e.y,
        })
        .collect()
}

fn check_pair(train: &Dataset, val: &Dataset) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(CbmError::EmptyDataset);
    }
    if train.schema() != val.schema() || train.task() != val.task() || train.d() != val.d() {
        return Err(CbmError::SchemaMismatch("train and validation datasets differ".into()));
    }
    Ok(())
}

/// Minibatch optimization with early stopping. On return `obj` holds the
/// parameters of the best validation epoch.
fn fit<E>(
    obj: &mut Objective,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    stage: Stage,
    stream: u64,
    val_error: E,
    log: &mut Vec<EpochRecord>,
) -> Result<()>
where
    E: Fn(&Objective) -> Result<f64>,
{
    let mut rng = RandomSource::with_stream(cfg.seed, stream);
    let mut optimizer = Optimizer::new(cfg.optimizer, obj.n_params());
    let mut params = obj.params();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let n = train.len();
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(n);
        let lr = cfg.optimizer.learning_rate_at(epoch);
        let (mut sum_total, mut sum_target, mut sum_concept) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i]).collect();
            let (parts, grad) = obj.loss_and_gradient(&batch)?;
            let m = batch.len() as f64;
            sum_total += parts.total * m;
            sum_target += parts.target * m;
            sum_concept += parts.concept * m;
            optimizer.step(&mut params, &grad, epoch);
            obj.set_params(&params)?;
        }
        let train_loss = sum_total / n as f64;
        if !train_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(CbmError::TrainingDiverged { epoch: epoch + 1 });
        }
        let val_metric = match cfg.early_stopping {
            StoppingMetric::Error => val_error(obj)?,
            StoppingMetric::Loss => obj.mean_loss(val)?.total,
            StoppingMetric::None => f64::NAN,
        };
        let improved = match (&best, cfg.early_stopping) {
            (_, StoppingMetric::None) => true,
            (None, _) => !val_metric.is_nan(),
            (Some((b, _)), _) => val_metric < *b,
        };
        if improved {
            best = Some((val_metric, params.clone()));
        }
        log.push(EpochRecord {
            stage,
            epoch: epoch + 1,
            learning_rate: lr,
            train_loss,
            train_target_loss: sum_target / n as f64,
            train_concept_loss: sum_concept / n as f64,
            val_metric,
            best: improved,
        });
    }
    if let Some((_, p)) = best {
        obj.set_params(&p)?;
    }
    Ok(())
}

fn connection_for(cfg: &TrainConfig, task: Task) -> Result<Connection> {
    let c = cfg.connection.unwrap_or_else(|| Connection::for_task(task));
    c.check_task(task)?;
    Ok(c)
}

fn mean_concept_error(ds: &Dataset, preds: &[Vec<f64>]) -> Result<f64> {
    let (errs, _, _) = concept_metrics(ds, preds)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

fn outputs(net: &Mlp, inputs: &[Sample]) -> Result<Vec<Vec<f64>>> {
    inputs.iter().map(|s| net.forward(s.input)).collect()
}

/// First stage shared by the independent and sequential regimes.
fn train_concept_stage(train: &Dataset, val: &Dataset, cfg: &TrainConfig, loss: &LossSpec, log: &mut Vec<EpochRecord>) -> Result<Mlp> {
    let g = Mlp::new(&cfg.architecture.concept_spec(train.d(), train.k(), cfg.seed))?;
    let mut obj = Objective::concepts(g, loss.clone());
    let (tr, va) = (samples(train, None), samples(val, None));
    fit(
        &mut obj,
        &tr,
        &va,
        cfg,
        Stage::Concepts,
        MAIN_STREAM,
        |o| mean_concept_error(val, &outputs(&o.first, &va)?),
        log,
    )?;
    Ok(obj.first)
}

fn train_target_stage(
    train: &Dataset,
    val: &Dataset,
    train_inputs: &[Vec<f64>],
    val_inputs: &[Vec<f64>],
    cfg: &TrainConfig,
    loss: &LossSpec,
    log: &mut Vec<EpochRecord>,
) -> Result<Mlp> {
    let f = Mlp::new(&cfg.architecture.target_spec(train.k(), train.task(), cfg.seed + TARGET_SEED_OFFSET))?;
    let mut obj = Objective::target(f, loss.clone());
    let (tr, va) = (samples(train, Some(train_inputs)), samples(val, Some(val_inputs)));
    let targets = val.targets();
    fit(
        &mut obj,
        &tr,
        &va,
        cfg,
        Stage::Target,
        TARGET_STREAM,
        |o| task_error(val.task(), &outputs(&o.first, &va)?, &targets),
        log,
    )?;
    Ok(obj.first)
}

fn prepare(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<LossSpec> {
    cfg.validate()?;
    check_pair(train, val)?;
    LossSpec::for_dataset(train, cfg.weighted_concept_loss)
}

/// `g` fit on `(x, c)`, `f` fit on `(c, y)` with true concepts. For
/// classification `f` reads `σ(ℓ̂)` at deployment, matching the `{0, 1}`
/// scale it was trained on.
pub fn train_independent(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Trained<BottleneckModel>> {
    let loss = prepare(train, val, cfg)?;
    let mut log = Vec::new();
    let g = train_concept_stage(train, val, cfg, &loss, &mut log)?;
    let true_c = |ds: &Dataset| ds.examples().iter().map(|e| e.c.clone()).collect::<Vec<_>>();
    let f = train_target_stage(train, val, &true_c(train), &true_c(val), cfg, &loss, &mut log)?;
    let connection = if train.task().is_classification() {
        Connection::Probabilities
    } else {
        Connection::Raw
    };
    let model = BottleneckModel::new(g, f, connection, Regime::Independent, train.task())?;
    Ok(Trained { model, log })
}

/// Same `g` as [`train_independent`]; `f` fit on `connect(ĝ(x))`.
pub fn train_sequential(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Trained<BottleneckModel>> {
    let loss = prepare(train, val, cfg)?;
    let connection = connection_for(cfg, train.task())?;
    let mut log = Vec::new();
    let g = train_concept_stage(train, val, cfg, &loss, &mut log)?;
    let predicted = |ds: &Dataset| -> Result<Vec<Vec<f64>>> {
        ds.examples()
            .iter()
            .map(|e| Ok(connection.connect(&g.forward(&e.x)?)))
            .collect()
    };
    let f = train_target_stage(train, val, &predicted(train)?, &predicted(val)?, cfg, &loss, &mut log)?;
    let model = BottleneckModel::new(g, f, connection, Regime::Sequential, train.task())?;
    Ok(Trained { model, log })
}

fn end_to_end_error(o: &Objective, val: &Dataset, va: &[Sample]) -> Result<f64> {
    let outs: Vec<Vec<f64>> = va
        .iter()
        .map(|s| o.second.forward(&o.connection.connect(&o.first.forward(s.input)?)))
        .collect::<Result<_>>()?;
    task_error(val.task(), &outs, &val.targets())
}

/// One optimization of `L_Y + λ Σ_j L_Cj`. Concept losses are summed over `j`.
pub fn train_joint(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Trained<BottleneckModel>> {
    let lambda = match cfg.regime {
        RegimeConfig::Joint { lambda } => lambda,
        other => return Err(CbmError::InvalidConfig(format!("train_joint given regime {other:?}"))),
    };
    let loss = prepare(train, val, cfg)?;
    let connection = connection_for(cfg, train.task())?;
    let arch = &cfg.architecture;
    let g = Mlp::new(&arch.concept_spec(train.d(), train.k(), cfg.seed))?;
    let f = Mlp::new(&arch.target_spec(train.k(), train.task(), cfg.seed + TARGET_SEED_OFFSET))?;
    let mut obj = Objective::joint(g, f, connection, lambda, loss);
    let (tr, va) = (samples(train, None), samples(val, None));
    let mut log = Vec::new();
    fit(&mut obj, &tr, &va, cfg, Stage::EndToEnd, MAIN_STREAM, |o| end_to_end_error(o, val, &va), &mut log)?;
    let model = BottleneckModel::new(obj.first, obj.second, connection, Regime::Joint { lambda }, train.task())?;
    Ok(Trained { model, log })
}

/// Direct `x → y`. With a bottleneck layer the network is initialized exactly
/// like a joint model's `g` followed by its `f`.
pub fn train_standard(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Trained<StandardModel>> {
    let bottleneck = match cfg.regime {
        RegimeConfig::Standard { bottleneck } => bottleneck,
        other => return Err(CbmError::InvalidConfig(format!("train_standard given regime {other:?}"))),
    };
    let loss = prepare(train, val, cfg)?;
    let arch = &cfg.architecture;
    let net = if bottleneck {
        let g = Mlp::new(&arch.concept_spec(train.d(), train.k(), cfg.seed))?;
        let f = Mlp::new(&arch.target_spec(train.k(), train.task(), cfg.seed + TARGET_SEED_OFFSET))?;
        Mlp::concat(&g, &f)
    } else {
        Mlp::new(&arch.unconstrained_spec(train.d(), train.task(), cfg.seed))?
    };
    let mut obj = Objective::target(net, loss);
    let (tr, va) = (samples(train, None), samples(val, None));
    let mut log = Vec::new();
    fit(&mut obj, &tr, &va, cfg, Stage::EndToEnd, MAIN_STREAM, |o| end_to_end_error(o, val, &va), &mut log)?;
    let model = StandardModel {
        net: obj.first,
        bottleneck_width: bottleneck.then(|| train.k()),
        task: train.task(),
    };
    Ok(Trained { model, log })
}

/// Unconstrained standard network split after the `g`-shaped hidden layers;
/// a linear concept head reads that split point. With `λ_mt = 0` the concept
/// head is never trained and the rest matches [`train_standard`].
pub fn train_multitask(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Trained<MultitaskModel>> {
    let lambda_mt = match cfg.regime {
        RegimeConfig::Multitask { lambda_mt } => lambda_mt,
        other => return Err(CbmError::InvalidConfig(format!("train_multitask given regime {other:?}"))),
    };
    let loss = prepare(train, val, cfg)?;
    let arch = &cfg.architecture;
    if arch.concept_hidden.is_empty() {
        return Err(CbmError::InvalidConfig("multitask trunk needs at least one hidden layer".into()));
    }
    let full = Mlp::new(&arch.unconstrained_spec(train.d(), train.task(), cfg.seed))?;
    let (trunk, head) = full.split(arch.concept_hidden.len());
    let head_spec = crate::models::NetworkSpec::mlp(
        trunk.output_width(),
        &[],
        train.k(),
        arch.hidden_activation,
        cfg.seed + CONCEPT_HEAD_SEED_OFFSET,
    );
    let concept_head = Mlp::new(&head_spec)?;
    let mut obj = Objective::multitask(trunk, head, concept_head, lambda_mt, loss);
    let (tr, va) = (samples(train, None), samples(val, None));
    let mut log = Vec::new();
    fit(&mut obj, &tr, &va, cfg, Stage::EndToEnd, MAIN_STREAM, |o| end_to_end_error(o, val, &va), &mut log)?;
    let model = MultitaskModel {
        trunk: obj.first,
        target_head: obj.second,
        concept_head: obj.concept_head.expect("multitask objective has a concept head"),
        lambda_mt,
        task: train.task(),
    };
    Ok(Trained { model, log })
}

/// Dispatches on the configured regime.
pub fn train(train_ds: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Trained<Model>> {
    fn wrap<M>(t: Trained<M>, f: fn(M) -> Model) -> Trained<Model> {
        Trained { model: f(t.model), log: t.log }
    }
    Ok(match cfg.regime {
        RegimeConfig::Independent => wrap(train_independent(train_ds, val, cfg)?, Model::Bottleneck),
        RegimeConfig::Sequential => wrap(train_sequential(train_ds, val, cfg)?, Model::Bottleneck),
        RegimeConfig::Joint { .. } => wrap(train_joint(train_ds, val, cfg)?, Model::Bottleneck),
        RegimeConfig::Standard { .. } => wrap(train_standard(train_ds, val, cfg)?, Model::Standard),
        RegimeConfig::Multitask { .. } => wrap(train_multitask(train_ds, val, cfg)?, Model::Multitask),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_linear_gaussian, ConceptKind, ConceptSchema, LabeledExample, Split};
    use crate::theory::LinearSetting;

    fn linear_data(n: usize, seed: u64) -> (Dataset, Dataset) {
        let mut rng = RandomSource::new(seed);
        let s = LinearSetting::random(6, 2, 1.0, 0.3, 0.3, &mut rng).unwrap();
        let tr = generate_linear_gaussian(&s, n, &mut rng).unwrap();
        let va = generate_linear_gaussian(&s, n / 2, &mut rng).unwrap().with_split(Split::Val);
        (tr, va)
    }

    fn quick(regime: RegimeConfig) -> TrainConfig {
        TrainConfig {
            regime,
            architecture: Architecture {
                concept_hidden: vec![8],
                target_hidden: Some(vec![6]),
                ..Architecture::default()
            },
            connection: None,
            optimizer: OptimizerConfig::adam(0.01),
            epochs: 5,
            batch_size: 16,
            early_stopping: StoppingMetric::Error,
            seed: 3,
            weighted_concept_loss: true,
        }
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = TrainConfig::regression_preset(RegimeConfig::Joint { lambda: 0.01 });
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        let minimal = r#"{"regime":{"kind":"independent"},"optimizer":{"kind":"sgd","learning_rate":0.1},"epochs":3,"batch_size":4}"#;
        let parsed = TrainConfig::from_json(minimal).unwrap();
        assert_eq!(parsed.optimizer.kind, OptimizerKind::Sgd { momentum: 0.9 });
        assert!(parsed.weighted_concept_loss);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = quick(RegimeConfig::Joint { lambda: -1.0 });
        assert!(cfg.validate().is_err());
        cfg.regime = RegimeConfig::Independent;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let (tr, va) = linear_data(80, 1);
        let cfg = quick(RegimeConfig::Sequential);
        let a = train_sequential(&tr, &va, &cfg).unwrap();
        let b = train_sequential(&tr, &va, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn sequential_and_independent_share_g() {
        let (tr, va) = linear_data(80, 2);
        let ind = train_independent(&tr, &va, &quick(RegimeConfig::Independent)).unwrap();
        let seq = train_sequential(&tr, &va, &quick(RegimeConfig::Sequential)).unwrap();
        assert_eq!(ind.model.g, seq.model.g);
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let (tr, va) = linear_data(60, 3);
        let mut cfg = quick(RegimeConfig::Standard { bottleneck: false });
        cfg.optimizer = OptimizerConfig::adam(0.05);
        cfg.epochs = 12;
        let t = train_standard(&tr, &va, &cfg).unwrap();
        let best = t
            .log
            .iter()
            .map(|r| r.val_metric)
            .fold(f64::INFINITY, f64::min);
        let m = evaluate(&Model::Standard(t.model), &va).unwrap();
        assert_eq!(m.task_error, best);
        let last_best = t.log.iter().rposition(|r| r.best).unwrap();
        assert_eq!(t.log[last_best].val_metric, best);
    }

    #[test]
    fn log_is_line_delimited_json() {
        let (tr, va) = linear_data(40, 4);
        let t = train_independent(&tr, &va, &quick(RegimeConfig::Independent)).unwrap();
        let mut buf = Vec::new();
        write_log(&t.log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 10);
        for line in text.lines() {
            let r: EpochRecord = serde_json::from_str(line).unwrap();
            assert!(r.train_loss.is_finite());
        }
    }

    #[test]
    fn divergence_reported() {
        let (tr, va) = linear_data(40, 5);
        let mut cfg = quick(RegimeConfig::Standard { bottleneck: false });
        cfg.optimizer = OptimizerConfig::sgd(1e6, 0.9);
        assert!(matches!(
            train_standard(&tr, &va, &cfg),
            Err(CbmError::TrainingDiverged { .. })
        ));
    }

    #[test]
    fn classification_requires_binary_concepts() {
        let schema = ConceptSchema::uniform(1, ConceptKind::Continuous, "c");
        let ex = vec![LabeledExample::new(vec![0.0], vec![0.3], 0.0), LabeledExample::new(vec![1.0], vec![0.1], 1.0)];
        let ds = Dataset::new(schema, Task::Classification { n_classes: 2 }, Split::Train, ex).unwrap();
        let r = train_joint(&ds, &ds.clone().with_split(Split::Val), &quick(RegimeConfig::Joint { lambda: 1.0 }));
        assert!(matches!(r, Err(CbmError::InvalidConfig(_))));
    }
}
