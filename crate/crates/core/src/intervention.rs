//! Test-time intervention: replacing predicted concepts with oracle values
//! and recomputing the target through `f`.
//!
//! Every edit happens in the space `f` reads. For raw and probability
//! connections the imposed value is the concept itself; for the logit
//! connection it is the 5th or 95th percentile of the training logits.
//! A concept marked not visible is imposed as if its value were 0.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CbmError, Result};
use crate::models::{BottleneckModel, Connection, Model};
use crate::numerics::RandomSource;
use crate::training::task_error;

/// True concepts and visibility of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub c: Vec<f64>,
    pub visibility: Vec<bool>,
}

/// Example id → true concepts, as an annotator would supply them.
#[derive(Debug, Clone, Default)]
pub struct Oracle {
    entries: BTreeMap<usize, OracleEntry>,
}

impl Oracle {
    /// Ids are positions in the dataset.
    pub fn from_dataset(ds: &Dataset) -> Self {
        let entries = ds
            .examples()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                (
                    i,
                    OracleEntry {
                        c: e.c.clone(),
                        visibility: e.visibility.clone(),
                    },
                )
            })
            .collect();
        Self { entries }
    }

    pub fn insert(&mut self, id: usize, entry: OracleEntry) {
        self.entries.insert(id, entry);
    }

    pub fn get(&self, id: usize) -> Result<&OracleEntry> {
        self.entries.get(&id).ok_or(CbmError::IndexOutOfRange {
            index: id,
            limit: self.entries.len(),
        })
    }
}

/// Per-concept training logits at the low and high percentiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitPercentiles {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

/// Nearest-rank percentile of sorted values: the `⌈p·n⌉`-th smallest, 1-based.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

pub fn compute_logit_percentiles(model: &Model, train: &Dataset, p_low: f64, p_high: f64) -> Result<LogitPercentiles> {
    let m = model.as_bottleneck()?;
    if !m.task.is_classification() {
        return Err(CbmError::NotClassification);
    }
    if train.is_empty() {
        return Err(CbmError::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&p_low) || !(0.0..=1.0).contains(&p_high) || p_low > p_high {
        return Err(CbmError::InvalidConfig(format!("bad percentile pair ({p_low}, {p_high})")));
    }
    let logits: Vec<Vec<f64>> = train
        .examples()
        .iter()
        .map(|e| m.forward_concepts(&e.x))
        .collect::<Result<_>>()?;
    let mut low = Vec::with_capacity(m.k());
    let mut high = Vec::with_capacity(m.k());
    for j in 0..m.k() {
        let mut col: Vec<f64> = logits.iter().map(|l| l[j]).collect();
        col.sort_by(f64::total_cmp);
        low.push(nearest_rank(&col, p_low));
        high.push(nearest_rank(&col, p_high));
    }
    Ok(LogitPercentiles { low, high })
}

/// What `f` should read for concept `j` once its true value is known.
pub fn imposed_value(
    model: &BottleneckModel,
    j: usize,
    entry: &OracleEntry,
    percentiles: Option<&LogitPercentiles>,
) -> Result<f64> {
    if j >= model.k() {
        return Err(CbmError::IndexOutOfRange { index: j, limit: model.k() });
    }
    let value = if entry.visibility[j] { entry.c[j] } else { 0.0 };
    match model.connection {
        Connection::Raw | Connection::Probabilities => Ok(value),
        Connection::Logits => {
            let p = percentiles.ok_or_else(|| {
                CbmError::InvalidConfig("logit-connected models need logit percentiles to intervene".into())
            })?;
            Ok(if value == 1.0 { p.high[j] } else { p.low[j] })
        }
    }
}

/// `f`'s current input and prediction for one example under intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionState {
    pub f_input: Vec<f64>,
    pub prediction: Vec<f64>,
}

impl InterventionState {
    pub fn new(model: &BottleneckModel, x: &[f64]) -> Result<Self> {
        let f_input = model.target_input(x)?;
        let prediction = model.predict_from_concepts(&f_input)?;
        Ok(Self { f_input, prediction })
    }

    /// Writes `values` into `f`'s input and recomputes the prediction.
    pub fn set(&mut self, model: &BottleneckModel, values: &[(usize, f64)]) -> Result<()> {
        for &(j, v) in values {
            if j >= self.f_input.len() {
                return Err(CbmError::IndexOutOfRange {
                    index: j,
                    limit: self.f_input.len(),
                });
            }
            self.f_input[j] = v;
        }
        self.prediction = model.predict_from_concepts(&self.f_input)?;
        Ok(())
    }

    /// Imposes oracle values on `concepts`; returns what was written.
    pub fn apply_oracle(
        &mut self,
        model: &BottleneckModel,
        concepts: &[usize],
        entry: &OracleEntry,
        percentiles: Option<&LogitPercentiles>,
    ) -> Result<Vec<(usize, f64)>> {
        let values = concepts
            .iter()
            .map(|&j| Ok((j, imposed_value(model, j, entry, percentiles)?)))
            .collect::<Result<Vec<_>>>()?;
        self.set(model, &values)?;
        Ok(values)
    }
}

fn check_distinct(indices: &[usize]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for &j in indices {
        if !seen.insert(j) {
            return Err(CbmError::InvalidConfig(format!("concept {j} listed twice")));
        }
    }
    Ok(())
}

/// Replaces `ĉ_j` by the true `c_j` for each listed index; returns the
/// edited concept vector and the new prediction.
pub fn intervene_regression(
    model: &Model,
    x: &[f64],
    indices: &[usize],
    entry: &OracleEntry,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = model.as_bottleneck()?;
    if m.connection != Connection::Raw {
        return Err(CbmError::InvalidConfig("regression intervention needs a raw-connected model".into()));
    }
    check_distinct(indices)?;
    let mut state = InterventionState::new(m, x)?;
    state.apply_oracle(m, indices, entry, None)?;
    Ok((state.f_input, state.prediction))
}

/// Concept indices of the requested groups, in group order.
pub fn expand_groups(groups: &BTreeMap<usize, Vec<usize>>, selected: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for g in selected {
        let members = groups.get(g).ok_or(CbmError::UnknownGroup(*g))?;
        for &j in members {
            if !out.contains(&j) {
                out.push(j);
            }
        }
    }
    Ok(out)
}

/// Intervenes on every concept of the selected groups; returns `f`'s new
/// input (logits or probabilities) and the new class scores.
pub fn intervene_classification(
    model: &Model,
    x: &[f64],
    selected_groups: &[usize],
    groups: &BTreeMap<usize, Vec<usize>>,
    entry: &OracleEntry,
    percentiles: Option<&LogitPercentiles>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = model.as_bottleneck()?;
    if !m.task.is_classification() {
        return Err(CbmError::NotClassification);
    }
    let concepts = expand_groups(groups, selected_groups)?;
    let mut state = InterventionState::new(m, x)?;
    state.apply_oracle(m, &concepts, entry, percentiles)?;
    Ok((state.f_input, state.prediction))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum Target {
    Concept(usize),
    Group(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub target: Target,
    /// `(concept index, value written into f's input)`.
    pub imposed: Vec<(usize, f64)>,
    pub prediction: Vec<f64>,
}

/// Ordered record of the edits made to one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionTrace {
    pub example_id: usize,
    pub initial_prediction: Vec<f64>,
    pub steps: Vec<TraceStep>,
}

impl InterventionTrace {
    pub fn new(example_id: usize, initial_prediction: Vec<f64>) -> Self {
        Self {
            example_id,
            initial_prediction,
            steps: Vec::new(),
        }
    }

    pub fn final_prediction(&self) -> &[f64] {
        self.steps.last().map_or(&self.initial_prediction, |s| &s.prediction)
    }

    /// Re-applies the imposed values from scratch and returns the prediction
    /// after each step.
    pub fn replay(&self, model: &BottleneckModel, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut state = InterventionState::new(model, x)?;
        self.steps
            .iter()
            .map(|s| {
                state.set(model, &s.imposed)?;
                Ok(state.prediction.clone())
            })
            .collect()
    }
}

/// Orders concepts by the drop in validation task error from intervening on
/// each one alone, largest first; ties go to the lower index.
pub fn greedy_validation_ordering(
    model: &Model,
    val: &Dataset,
    percentiles: Option<&LogitPercentiles>,
) -> Result<Vec<usize>> {
    let m = model.as_bottleneck()?;
    if val.is_empty() {
        return Err(CbmError::EmptyDataset);
    }
    let oracle = Oracle::from_dataset(val);
    let targets = val.targets();
    let base = task_error(m.task, &predictions_after(m, val, &oracle, percentiles, &[])?, &targets)?;
    let mut gains: Vec<(usize, f64)> = (0..m.k())
        .map(|j| {
            let err = task_error(m.task, &predictions_after(m, val, &oracle, percentiles, &[j])?, &targets)?;
            Ok((j, base - err))
        })
        .collect::<Result<_>>()?;
    gains.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(gains.into_iter().map(|(j, _)| j).collect())
}

fn predictions_after(
    m: &BottleneckModel,
    ds: &Dataset,
    oracle: &Oracle,
    percentiles: Option<&LogitPercentiles>,
    concepts: &[usize],
) -> Result<Vec<Vec<f64>>> {
    ds.examples()
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let mut s = InterventionState::new(m, &e.x)?;
            if !concepts.is_empty() {
                s.apply_oracle(m, concepts, oracle.get(i)?, percentiles)?;
            }
            Ok(s.prediction)
        })
        .collect()
}

/// Which concepts to reveal, and in what order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// The same concept order for every example.
    FixedOrder { order: Vec<usize> },
    /// Concept groups in an order drawn per example from `seed`.
    RandomGroup { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: usize,
    pub task_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionCurve {
    pub policy: Policy,
    pub points: Vec<CurvePoint>,
    pub seeds: Vec<u64>,
}

/// Test error after intervening on the first `t` units of the policy, for
/// `t = 0..=K`. Point 0 is the plain model's error.
pub fn intervention_curve(
    model: &Model,
    test: &Dataset,
    oracle: &Oracle,
    policy: &Policy,
    percentiles: Option<&LogitPercentiles>,
) -> Result<InterventionCurve> {
    let m = model.as_bottleneck()?;
    if test.is_empty() {
        return Err(CbmError::EmptyDataset);
    }
    let groups = test.schema().groups();
    let units: Vec<Vec<usize>> = match policy {
        Policy::FixedOrder { order } => {
            check_distinct(order)?;
            if let Some(&j) = order.iter().find(|&&j| j >= m.k()) {
                return Err(CbmError::IndexOutOfRange { index: j, limit: m.k() });
            }
            order.iter().map(|&j| vec![j]).collect()
        }
        Policy::RandomGroup { .. } => groups.values().cloned().collect(),
    };
    let per_example: Vec<Vec<Vec<f64>>> = test
        .examples()
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let entry = oracle.get(i)?;
            let order: Vec<usize> = match policy {
                Policy::FixedOrder { .. } => (0..units.len()).collect(),
                Policy::RandomGroup { seed } => RandomSource::with_stream(*seed, i as u64).permutation(units.len()),
            };
            let mut state = InterventionState::new(m, &e.x)?;
            let mut preds = Vec::with_capacity(units.len() + 1);
            preds.push(state.prediction.clone());
            for u in order {
                state.apply_oracle(m, &units[u], entry, percentiles)?;
                preds.push(state.prediction.clone());
            }
            Ok(preds)
        })
        .collect::<Result<_>>()?;
    let targets = test.targets();
    let points = (0..=units.len())
        .map(|t| {
            let outs: Vec<Vec<f64>> = per_example.iter().map(|p| p[t].clone()).collect();
            Ok(CurvePoint {
                t,
                task_error: task_error(m.task, &outs, &targets)?,
            })
        })
        .collect::<Result<_>>()?;
    let seeds = match policy {
        Policy::FixedOrder { .. } => Vec::new(),
        Policy::RandomGroup { seed } => vec![*seed],
    };
    Ok(InterventionCurve {
        policy: policy.clone(),
        points,
        seeds,
    })
}
