//! Post-hoc linear probes: per-concept linear readouts fit on a model's
//! hidden activations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ConceptKind, Dataset};
use crate::error::{CbmError, Result};
use crate::models::{sigmoid, Model};
use crate::numerics::{least_squares_fit, Matrix};
use crate::training::concept_metrics;

/// Relative ridge on standardized activations; keeps dead or duplicated
/// units from making the design singular.
const RIDGE: f64 = 1e-8;
const LOGISTIC_ITERATIONS: usize = 500;
const LOGISTIC_L2: f64 = 1e-4;

/// Linear map from one layer's activations to the `k` concepts. Binary
/// concepts are read as logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub layer: usize,
    /// `width × k`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub fitted_on: String,
}

impl LinearProbe {
    pub fn predict(&self, activations: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.bias.clone();
        if activations.len() != self.weights.rows() {
            return Err(CbmError::ShapeMismatch {
                expected: self.weights.rows(),
                actual: activations.len(),
            });
        }
        for (i, &a) in activations.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.weights.row(i)) {
                *o += a * w;
            }
        }
        Ok(out)
    }
}

fn layer_activations(model: &Model, ds: &Dataset, layer: usize) -> Result<Vec<Vec<f64>>> {
    if layer >= model.n_layers() {
        return Err(CbmError::IndexOutOfRange {
            index: layer,
            limit: model.n_layers(),
        });
    }
    ds.examples().iter().map(|e| model.hidden_activations(&e.x, layer)).collect()
}

/// Column means and scales; constant columns get scale 0 and are ignored.
fn standardize(acts: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = acts.len() as f64;
    let p = acts[0].len();
    let mut mean = vec![0.0; p];
    for a in acts {
        for (m, v) in mean.iter_mut().zip(a) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; p];
    for a in acts {
        for ((s, v), m) in var.iter_mut().zip(a).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let scale = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                0.0
            }
        })
        .collect();
    (mean, scale)
}

fn features(a: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(mean.iter().zip(scale))
        .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { 0.0 })
        .collect()
}

/// Ridge least squares on standardized features with an unpenalized intercept.
/// Returns `(weights on features, intercept)` for every column of `targets`.
fn fit_least_squares(z: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let n = z.len();
    let p = z[0].len();
    let ridge = (RIDGE * n as f64).sqrt();
    let mut design = Matrix::zeros(n + p, p + 1);
    for (i, row) in z.iter().enumerate() {
        design.row_mut(i)[..p].copy_from_slice(row);
        design[(i, p)] = 1.0;
    }
    for j in 0..p {
        design[(n + j, j)] = ridge;
    }
    let m = targets[0].len();
    let mut response = Matrix::zeros(n + p, m);
    for (i, t) in targets.iter().enumerate() {
        response.row_mut(i).copy_from_slice(t);
    }
    let coef = least_squares_fit(&design, &response)?;
    let weights = (0..m).map(|c| (0..p).map(|j| coef[(j, c)]).collect()).collect();
    let intercepts = (0..m).map(|c| coef[(p, c)]).collect();
    Ok((weights, intercepts))
}

/// L2-regularized logistic regression by Nesterov-accelerated gradient
/// descent from zero, with step `1/L` for the smoothness constant `L`.
fn fit_logistic(z: &[Vec<f64>], labels: &[f64]) -> (Vec<f64>, f64) {
    let n = z.len() as f64;
    let p = z[0].len();
    // Standardized columns and the intercept each have mean square at most 1.
    let lipschitz = 0.25 * (p as f64 + 1.0) + LOGISTIC_L2;
    let step = 1.0 / lipschitz;
    let mut theta = vec![0.0; p + 1];
    let mut prev = theta.clone();
    for it in 0..LOGISTIC_ITERATIONS {
        let momentum = it as f64 / (it as f64 + 3.0);
        let look: Vec<f64> = theta.iter().zip(&prev).map(|(t, q)| t + momentum * (t - q)).collect();
        let mut grad = vec![0.0; p + 1];
        for (row, &y) in z.iter().zip(labels) {
            let s = row.iter().zip(&look).map(|(a, w)| a * w).sum::<f64>() + look[p];
            let r = sigmoid(s) - y;
            for (g, a) in grad.iter_mut().zip(row) {
                *g += r * a;
            }
            grad[p] += r;
        }
        prev = theta;
        theta = look
            .iter()
            .zip(&grad)
            .enumerate()
            .map(|(j, (w, g))| {
                let reg = if j < p { LOGISTIC_L2 * w } else { 0.0 };
                w - step * (g / n + reg)
            })
            .collect();
    }
    let b = theta.pop().expect("intercept present");
    (theta, b)
}

/// Fits one probe per concept on activations of `layer`: least squares for
/// real-valued concepts, logistic regression for binary ones.
pub fn fit_probe(model: &Model, ds: &Dataset, layer: usize) -> Result<LinearProbe> {
    if ds.is_empty() {
        return Err(CbmError::EmptyDataset);
    }
    let acts = layer_activations(model, ds, layer)?;
    let (mean, scale) = standardize(&acts);
    let z: Vec<Vec<f64>> = acts.iter().map(|a| features(a, &mean, &scale)).collect();
    let width = mean.len();
    let k = ds.k();
    let kinds: Vec<ConceptKind> = ds.schema().concepts.iter().map(|c| c.kind).collect();

    let mut std_weights: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut std_bias = vec![0.0; k];

    let real: Vec<usize> = (0..k).filter(|&j| kinds[j] != ConceptKind::Binary).collect();
    if !real.is_empty() {
        let targets: Vec<Vec<f64>> = ds.examples().iter().map(|e| real.iter().map(|&j| e.c[j]).collect()).collect();
        let (w, b) = fit_least_squares(&z, &targets)?;
        for (idx, &j) in real.iter().enumerate() {
            std_weights[j] = w[idx].clone();
            std_bias[j] = b[idx];
        }
    }
    let binary: Vec<usize> = (0..k).filter(|&j| kinds[j] == ConceptKind::Binary).collect();
    let fits: Vec<(Vec<f64>, f64)> = binary
        .par_iter()
        .map(|&j| {
            let labels: Vec<f64> = ds.examples().iter().map(|e| e.c[j]).collect();
            fit_logistic(&z, &labels)
        })
        .collect();
    for (&j, (w, b)) in binary.iter().zip(fits) {
        std_weights[j] = w;
        std_bias[j] = b;
    }

    // Fold the standardization back into raw-activation weights.
    let mut weights = Matrix::zeros(width, k);
    let mut bias = std_bias;
    for j in 0..k {
        for i in 0..width {
            if scale[i] > 0.0 {
                let w = std_weights[j][i] / scale[i];
                weights[(i, j)] = w;
                bias[j] -= w * mean[i];
            }
        }
    }
    Ok(LinearProbe {
        layer,
        weights,
        bias,
        fitted_on: format!("{:?}", ds.split()).to_lowercase(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeErrors {
    pub per_concept: Vec<f64>,
    pub mean: f64,
}

/// RMSE for real-valued concepts, 0-1 error for binary ones.
pub fn probe_concept_error(probe: &LinearProbe, model: &Model, ds: &Dataset) -> Result<ProbeErrors> {
    let acts = layer_activations(model, ds, probe.layer)?;
    let preds: Vec<Vec<f64>> = acts.iter().map(|a| probe.predict(a)).collect::<Result<_>>()?;
    let (per_concept, _, _) = concept_metrics(ds, &preds)?;
    let mean = per_concept.iter().sum::<f64>() / per_concept.len() as f64;
    Ok(ProbeErrors { per_concept, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    pub layer: usize,
    pub width: usize,
    pub val: ProbeErrors,
    pub test: ProbeErrors,
}

/// Probes on every layer, with the layer chosen by validation error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layers: Vec<LayerProbe>,
    pub best_layer: usize,
    pub best_test: ProbeErrors,
}

/// Fits on `train`, selects on `val`, reports on `test`. Ties in validation
/// error go to the earlier layer.
pub fn probe_report(model: &Model, train: &Dataset, val: &Dataset, test: &Dataset) -> Result<ProbeReport> {
    let layers: Vec<LayerProbe> = (0..model.n_layers())
        .into_par_iter()
        .map(|layer| {
            let probe = fit_probe(model, train, layer)?;
            Ok(LayerProbe {
                layer,
                width: probe.weights.rows(),
                val: probe_concept_error(&probe, model, val)?,
                test: probe_concept_error(&probe, model, test)?,
            })
        })
        .collect::<Result<_>>()?;
    let best = layers
        .iter()
        .fold(None::<&LayerProbe>, |acc, l| match acc {
            Some(b) if b.val.mean <= l.val.mean => Some(b),
            _ => Some(l),
        })
        .ok_or_else(|| CbmError::EmptyResult("model has no layers".into()))?;
    Ok(ProbeReport {
        best_layer: best.layer,
        best_test: best.test.clone(),
        layers: layers.clone(),
    })
}
