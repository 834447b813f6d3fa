use serde::{Deserialize, Serialize};

use crate::data::{ConceptKind, Dataset, Task};
use crate::error::{CbmError, Result};
use crate::models::{argmax, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptScore {
    Correlation,
    F1,
}

/// Task error (RMSE or 0-1 error) and per-concept errors (RMSE for real
/// concepts, 0-1 error for binary ones).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task_error: f64,
    pub concept_errors: Vec<f64>,
    pub mean_concept_error: Option<f64>,
    /// Pearson correlation for real concepts, F1 for binary ones.
    pub concept_scores: Vec<f64>,
    pub concept_score_kinds: Vec<ConceptScore>,
}

/// RMSE for regression, misclassification rate for classification.
pub fn task_error(task: Task, outputs: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
    if outputs.len() != targets.len() {
        return Err(CbmError::ShapeMismatch {
            expected: targets.len(),
            actual: outputs.len(),
        });
    }
    if targets.is_empty() {
        return Err(CbmError::EmptyDataset);
    }
    let n = targets.len() as f64;
    Ok(match task {
        Task::Regression => {
            let sse: f64 = outputs.iter().zip(targets).map(|(o, y)| (o[0] - y).powi(2)).sum();
            (sse / n).sqrt()
        }
        Task::Classification { .. } => {
            let wrong = outputs
                .iter()
                .zip(targets)
                .filter(|(o, &y)| argmax(o) != y as usize)
                .count();
            wrong as f64 / n
        }
    })
}

/// Per-concept errors and scores of raw concept predictions. Binary concepts
/// read predictions as logits and threshold them at zero.
pub fn concept_metrics(ds: &Dataset, predictions: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, Vec<ConceptScore>)> {
    if predictions.len() != ds.len() {
        return Err(CbmError::ShapeMismatch {
            expected: ds.len(),
            actual: predictions.len(),
        });
    }
    if ds.is_empty() {
        return Err(CbmError::EmptyDataset);
    }
    let n = ds.len() as f64;
    let mut errors = Vec::with_capacity(ds.k());
    let mut scores = Vec::with_capacity(ds.k());
    let mut kinds = Vec::with_capacity(ds.k());
    for (j, spec) in ds.schema().concepts.iter().enumerate() {
        let truth: Vec<f64> = ds.examples().iter().map(|e| e.c[j]).collect();
        let pred: Vec<f64> = predictions.iter().map(|p| p[j]).collect();
        if spec.kind == ConceptKind::Binary {
            let hard: Vec<bool> = pred.iter().map(|&l| l > 0.0).collect();
            let (mut tp, mut fp, mut fneg, mut wrong) = (0usize, 0usize, 0usize, 0usize);
            for (&h, &t) in hard.iter().zip(&truth) {
                let t = t == 1.0;
                match (h, t) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
                if h != t {
                    wrong += 1;
                }
            }
            errors.push(wrong as f64 / n);
            let denom = 2 * tp + fp + fneg;
            scores.push(if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 });
            kinds.push(ConceptScore::F1);
        } else {
            let sse: f64 = pred.iter().zip(&truth).map(|(p, t)| (p - t).powi(2)).sum();
            errors.push((sse / n).sqrt());
            scores.push(pearson(&pred, &truth));
            kinds.push(ConceptScore::Correlation);
        }
    }
    Ok((errors, scores, kinds))
}

/// Pearson correlation; zero when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

pub fn predict_all(model: &Model, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.examples().iter().map(|e| model.forward_target(&e.x)).collect()
}

pub fn evaluate(model: &Model, ds: &Dataset) -> Result<Metrics> {
    if model.task() != ds.task() {
        return Err(CbmError::SchemaMismatch(format!(
            "model task {:?} vs dataset task {:?}",
            model.task(),
            ds.task()
        )));
    }
    let outputs = predict_all(model, ds)?;
    let task_err = task_error(ds.task(), &outputs, &ds.targets())?;
    let concepts: Option<Vec<Vec<f64>>> = ds
        .examples()
        .iter()
        .map(|e| model.forward_concepts(&e.x))
        .collect::<Result<_>>()?;
    let (concept_errors, concept_scores, concept_score_kinds) = match concepts {
        Some(preds) => concept_metrics(ds, &preds)?,
        None => (Vec::new(), Vec::new(), Vec::new()),
    };
    let mean_concept_error = if concept_errors.is_empty() {
        None
    } else {
        Some(concept_errors.iter().sum::<f64>() / concept_errors.len() as f64)
    };
    Ok(Metrics {
        task_error: task_err,
        concept_errors,
        mean_concept_error,
        concept_scores,
        concept_score_kinds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_zero_on_plus_minus_one_has_unit_rmse() {
        let outputs = vec![vec![0.0]; 4];
        let targets = [1.0, -1.0, 1.0, -1.0];
        assert_eq!(task_error(Task::Regression, &outputs, &targets).unwrap(), 1.0);
    }

    #[test]
    fn zero_one_error() {
        let outputs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 3.0]];
        let e = task_error(Task::Classification { n_classes: 2 }, &outputs, &[0.0, 0.0, 1.0]).unwrap();
        assert!((e - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]), 0.0);
    }
}
