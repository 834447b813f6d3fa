//! Concept clean-up: majority voting, sparsity filters, z-scoring, grade
//! truncation and subsampling.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ConceptKind, ConceptSchema, Dataset, LabeledExample, Task};
use crate::error::{CbmError, Result};
use crate::numerics::RandomSource;

pub const INSTANCE_FILTER_THRESHOLD: f64 = 0.95;
pub const CLASS_FILTER_MIN_CLASSES: usize = 10;

fn n_classes(ds: &Dataset) -> Result<usize> {
    match ds.task() {
        Task::Classification { n_classes } => Ok(n_classes),
        Task::Regression => Err(CbmError::NotClassification),
    }
}

/// Class-level concept values: entry `[y][j]` is 1 iff strictly more than half
/// of class `y`'s examples have `c_j = 1`. Classes without examples get all zeros.
pub fn majority_vote_table(ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let n_classes = n_classes(ds)?;
    if !ds.schema().all_binary() {
        return Err(CbmError::InvalidDataset("majority vote needs binary concepts".into()));
    }
    let k = ds.k();
    let mut ones = vec![vec![0usize; k]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for e in ds.examples() {
        let y = e.label();
        counts[y] += 1;
        for (j, &v) in e.c.iter().enumerate() {
            if v == 1.0 {
                ones[y][j] += 1;
            }
        }
    }
    Ok(ones
        .iter()
        .zip(&counts)
        .map(|(row, &n)| row.iter().map(|&o| if 2 * o > n { 1.0 } else { 0.0 }).collect())
        .collect())
}

/// Replaces every example's concepts with its class's majority-vote values.
pub fn majority_vote_concepts(ds: &Dataset) -> Result<Dataset> {
    let table = majority_vote_table(ds)?;
    let examples = ds
        .examples()
        .iter()
        .map(|e| LabeledExample {
            c: table[e.label()].clone(),
            ..e.clone()
        })
        .collect();
    ds.with_examples(examples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FilterMode {
    /// Drop concepts whose most common value covers at least `threshold` of examples.
    Instance { threshold: f64 },
    /// Keep class-level concepts present (value 1) in at least `min_classes` classes.
    Class { min_classes: usize },
}

impl FilterMode {
    pub fn instance() -> Self {
        FilterMode::Instance {
            threshold: INSTANCE_FILTER_THRESHOLD,
        }
    }

    pub fn class() -> Self {
        FilterMode::Class {
            min_classes: CLASS_FILTER_MIN_CLASSES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub schema: ConceptSchema,
    pub dataset: Dataset,
    /// Original indices of the surviving concepts, ascending.
    pub kept: Vec<usize>,
}

pub fn filter_sparse_concepts(ds: &Dataset, mode: FilterMode) -> Result<FilterOutcome> {
    let k = ds.k();
    let kept: Vec<usize> = match mode {
        FilterMode::Instance { threshold } => {
            if ds.schema().concepts.iter().any(|c| c.kind == ConceptKind::Continuous) {
                return Err(CbmError::InvalidDataset(
                    "instance filter needs binary or ordinal concepts".into(),
                ));
            }
            if ds.is_empty() {
                return Err(CbmError::EmptyDataset);
            }
            let n = ds.len() as f64;
            (0..k)
                .filter(|&j| {
                    let mut counts: HashMap<u64, usize> = HashMap::new();
                    for e in ds.examples() {
                        *counts.entry(e.c[j].to_bits()).or_default() += 1;
                    }
                    let dominant = counts.values().copied().max().unwrap_or(0) as f64;
                    dominant / n < threshold
                })
                .collect()
        }
        FilterMode::Class { min_classes } => {
            let table = majority_vote_table(ds)?;
            (0..k)
                .filter(|&j| table.iter().filter(|row| row[j] == 1.0).count() >= min_classes)
                .collect()
        }
    };
    if kept.is_empty() {
        return Err(CbmError::AllConceptsFiltered);
    }
    let dataset = project_concepts(ds, &kept)?;
    Ok(FilterOutcome {
        schema: dataset.schema().clone(),
        dataset,
        kept,
    })
}

/// Restricts concepts (values and visibility) to `kept`, preserving x and y.
pub fn project_concepts(ds: &Dataset, kept: &[usize]) -> Result<Dataset> {
    if let Some(&bad) = kept.iter().find(|&&j| j >= ds.k()) {
        return Err(CbmError::IndexOutOfRange {
            index: bad,
            limit: ds.k(),
        });
    }
    let schema = ConceptSchema {
        concepts: kept.iter().map(|&j| ds.schema().concepts[j].clone()).collect(),
        visibility_aware: ds.schema().visibility_aware,
    };
    let examples = ds
        .examples()
        .iter()
        .map(|e| LabeledExample {
            x: e.x.clone(),
            c: kept.iter().map(|&j| e.c[j]).collect(),
            visibility: kept.iter().map(|&j| e.visibility[j]).collect(),
            y: e.y,
        })
        .collect();
    Dataset::new(schema, ds.task(), ds.split(), examples)
}

/// Per-concept training statistics. `sd` is the population standard deviation.
/// `scaled` is false for binary and zero-variance concepts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptStats {
    pub mean: f64,
    pub sd: f64,
    pub scaled: bool,
}

/// Z-scores continuous and ordinal concepts with statistics from `train`,
/// applying them to every dataset in `apply_to`. Zero-variance concepts are
/// left as they are.
pub fn zscore_concepts(
    train: &Dataset,
    apply_to: &[&Dataset],
) -> Result<(Vec<Dataset>, Vec<ConceptStats>)> {
    if train.is_empty() {
        return Err(CbmError::EmptyDataset);
    }
    let n = train.len() as f64;
    let stats: Vec<ConceptStats> = train
        .schema()
        .concepts
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let mean = train.examples().iter().map(|e| e.c[j]).sum::<f64>() / n;
            let var = train
                .examples()
                .iter()
                .map(|e| (e.c[j] - mean) * (e.c[j] - mean))
                .sum::<f64>()
                / n;
            let sd = var.sqrt();
            ConceptStats {
                mean,
                sd,
                scaled: spec.kind != ConceptKind::Binary && sd > 0.0,
            }
        })
        .collect();
    let mut out = Vec::with_capacity(apply_to.len());
    for ds in apply_to {
        if ds.schema() != train.schema() {
            return Err(CbmError::SchemaMismatch(
                "z-scored dataset must share the training schema".into(),
            ));
        }
        let examples = ds
            .examples()
            .iter()
            .map(|e| {
                let mut e = e.clone();
                for (v, s) in e.c.iter_mut().zip(&stats) {
                    if s.scaled {
                        *v = (*v - s.mean) / s.sd;
                    }
                }
                e
            })
            .collect();
        out.push(ds.with_examples(examples)?);
    }
    Ok((out, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TruncationReport {
    /// Fractional values that were changed.
    pub truncated: usize,
    /// Negative inputs, which floor away from zero.
    pub negative: usize,
}

/// Floors every ordinal concept value.
pub fn truncate_fractional_grades(ds: &Dataset) -> Result<(Dataset, TruncationReport)> {
    let mut report = TruncationReport::default();
    let ordinal: Vec<bool> = ds
        .schema()
        .concepts
        .iter()
        .map(|c| c.kind == ConceptKind::Ordinal)
        .collect();
    let examples = ds
        .examples()
        .iter()
        .map(|e| {
            let mut e = e.clone();
            for (v, &is_ordinal) in e.c.iter_mut().zip(&ordinal) {
                if is_ordinal {
                    if v.fract() != 0.0 {
                        report.truncated += 1;
                    }
                    if *v < 0.0 {
                        report.negative += 1;
                    }
                    *v = v.floor();
                }
            }
            e
        })
        .collect();
    Ok((ds.with_examples(examples)?, report))
}

fn take_count(fraction: f64, n: usize) -> usize {
    // guard against 0.25 * 84 landing a hair above 21
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Random subset of `⌈fraction·n⌉` examples (per class when `stratified`),
/// returned in original order.
pub fn subsample(
    ds: &Dataset,
    fraction: f64,
    stratified: bool,
    rng: &mut RandomSource,
) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CbmError::InvalidConfig(format!(
            "subsample fraction {fraction} outside (0, 1]"
        )));
    }
    if ds.is_empty() {
        return Err(CbmError::EmptyResult("cannot subsample an empty dataset".into()));
    }
    let mut chosen: Vec<usize> = if stratified {
        let n_classes = n_classes(ds)?;
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
        for (i, e) in ds.examples().iter().enumerate() {
            by_class[e.label()].push(i);
        }
        let mut chosen = Vec::new();
        for (class, mut members) in by_class.into_iter().enumerate() {
            let take = take_count(fraction, members.len());
            if take == 0 {
                return Err(CbmError::EmptyResult(format!("class {class} has no examples")));
            }
            rng.shuffle(&mut members);
            chosen.extend_from_slice(&members[..take]);
        }
        chosen
    } else {
        let mut all: Vec<usize> = (0..ds.len()).collect();
        rng.shuffle(&mut all);
        all.truncate(take_count(fraction, ds.len()));
        all
    };
    chosen.sort_unstable();
    Ok(ds.subset(&chosen))
}
