use serde::{Deserialize, Serialize};

use crate::data::{ConceptKind, Dataset, Task};
use crate::error::{CbmError, Result};
use crate::models::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetLoss {
    SquaredError,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptLoss {
    SquaredError,
    /// Binary cross-entropy on a logit, positive term scaled by the concept weight.
    WeightedBce,
}

/// Target loss, one concept loss per concept, and positive-class weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub target: TargetLoss,
    pub concepts: Vec<ConceptLoss>,
    pub positive_weights: Vec<f64>,
}

impl LossSpec {
    /// Squared error everywhere for regression. For classification every
    /// concept must be binary and gets weighted BCE; with `weighted`, the
    /// weight is the training ratio of negatives to positives.
    pub fn for_dataset(train: &Dataset, weighted: bool) -> Result<Self> {
        let k = train.k();
        match train.task() {
            Task::Regression => Ok(Self {
                target: TargetLoss::SquaredError,
                concepts: vec![ConceptLoss::SquaredError; k],
                positive_weights: vec![1.0; k],
            }),
            Task::Classification { .. } => {
                if let Some(c) = train.schema().concepts.iter().find(|c| c.kind != ConceptKind::Binary) {
                    return Err(CbmError::InvalidConfig(format!(
                        "classification bottlenecks need binary concepts; {} is {:?}",
                        c.name, c.kind
                    )));
                }
                let positive_weights = (0..k)
                    .map(|j| {
                        if !weighted {
                            return 1.0;
                        }
                        let pos = train.examples().iter().filter(|e| e.c[j] == 1.0).count();
                        let neg = train.len() - pos;
                        if pos == 0 || neg == 0 {
                            1.0
                        } else {
                            neg as f64 / pos as f64
                        }
                    })
                    .collect();
                Ok(Self {
                    target: TargetLoss::SoftmaxCrossEntropy,
                    concepts: vec![ConceptLoss::WeightedBce; k],
                    positive_weights,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.concepts.len() != self.positive_weights.len() {
            return Err(CbmError::ShapeMismatch {
                expected: self.concepts.len(),
                actual: self.positive_weights.len(),
            });
        }
        if self.positive_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(CbmError::InvalidConfig("positive-class weights must be positive".into()));
        }
        Ok(())
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Summed concept loss and its gradient with respect to `predicted`.
///
/// Weighted BCE is multiplied by `2 / (1 + w)`: a constant 0.5 predictor on a
/// balanced pair of labels then scores the same as under plain BCE, and
/// `w = 1` is plain BCE.
pub fn concept_loss(predicted: &[f64], truth: &[f64], spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    let k = spec.concepts.len();
    for len in [predicted.len(), truth.len()] {
        if len != k {
            return Err(CbmError::ShapeMismatch { expected: k, actual: len });
        }
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; k];
    for j in 0..k {
        let (p, c) = (predicted[j], truth[j]);
        match spec.concepts[j] {
            ConceptLoss::SquaredError => {
                let r = p - c;
                total += r * r;
                grad[j] = 2.0 * r;
            }
            ConceptLoss::WeightedBce => {
                if c != 0.0 && c != 1.0 {
                    return Err(CbmError::NonBinaryLabel(c));
                }
                let w = spec.positive_weights[j];
                let scale = 2.0 / (1.0 + w);
                if c == 1.0 {
                    total += scale * w * softplus(-p);
                    grad[j] = -scale * w * sigmoid(-p);
                } else {
                    total += scale * softplus(p);
                    grad[j] = scale * sigmoid(p);
                }
            }
        }
    }
    Ok((total, grad))
}

/// Target loss and gradient with respect to the output scores.
pub fn target_loss(output: &[f64], y: f64, kind: TargetLoss) -> Result<(f64, Vec<f64>)> {
    match kind {
        TargetLoss::SquaredError => {
            if output.len() != 1 {
                return Err(CbmError::ShapeMismatch {
                    expected: 1,
                    actual: output.len(),
                });
            }
            let r = output[0] - y;
            Ok((r * r, vec![2.0 * r]))
        }
        TargetLoss::SoftmaxCrossEntropy => {
            let label = y as usize;
            if y < 0.0 || y.fract() != 0.0 || label >= output.len() {
                return Err(CbmError::IndexOutOfRange {
                    index: label,
                    limit: output.len(),
                });
            }
            let max = output.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = output.iter().map(|&s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let loss = sum.ln() + max - output[label];
            let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
            grad[label] -= 1.0;
            Ok((loss, grad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_error, RandomSource};

    fn bce_spec(weights: Vec<f64>) -> LossSpec {
        LossSpec {
            target: TargetLoss::SoftmaxCrossEntropy,
            concepts: vec![ConceptLoss::WeightedBce; weights.len()],
            positive_weights: weights,
        }
    }

    #[test]
    fn squared_error_zero_at_truth() {
        let spec = LossSpec {
            target: TargetLoss::SquaredError,
            concepts: vec![ConceptLoss::SquaredError; 3],
            positive_weights: vec![1.0; 3],
        };
        let (l, g) = concept_loss(&[0.5, -1.0, 2.0], &[0.5, -1.0, 2.0], &spec).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn positive_term_weighted_nine_times_before_normalization() {
        let spec = bce_spec(vec![9.0]);
        let plain = bce_spec(vec![1.0]);
        let logit = 0.3;
        let (lw, _) = concept_loss(&[logit], &[1.0], &spec).unwrap();
        let (lp, _) = concept_loss(&[logit], &[1.0], &plain).unwrap();
        assert!((lw / (2.0 / 10.0) - 9.0 * lp).abs() < 1e-12);
        let (nw, _) = concept_loss(&[logit], &[0.0], &spec).unwrap();
        let (np, _) = concept_loss(&[logit], &[0.0], &plain).unwrap();
        assert!((nw / (2.0 / 10.0) - np).abs() < 1e-12);
    }

    #[test]
    fn half_predictor_matches_unweighted_on_balanced_pair() {
        let weighted = bce_spec(vec![9.0]);
        let plain = bce_spec(vec![1.0]);
        let total = |s: &LossSpec| {
            concept_loss(&[0.0], &[1.0], s).unwrap().0 + concept_loss(&[0.0], &[0.0], s).unwrap().0
        };
        assert!((total(&weighted) - total(&plain)).abs() < 1e-12);
        assert!((total(&plain) - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn non_binary_label_rejected() {
        let r = concept_loss(&[0.0], &[0.5], &bce_spec(vec![1.0]));
        assert!(matches!(r, Err(CbmError::NonBinaryLabel(v)) if v == 0.5));
    }

    #[test]
    fn concept_gradient_matches_finite_differences() {
        let mut rng = RandomSource::new(4);
        for trial in 0..10 {
            let k = 4;
            let pred: Vec<f64> = (0..k).map(|_| 2.0 * rng.normal()).collect();
            let truth: Vec<f64> = (0..k).map(|_| if rng.bernoulli(0.3) { 1.0 } else { 0.0 }).collect();
            let spec = LossSpec {
                target: TargetLoss::SquaredError,
                concepts: (0..k)
                    .map(|j| if (j + trial) % 2 == 0 { ConceptLoss::WeightedBce } else { ConceptLoss::SquaredError })
                    .collect(),
                positive_weights: (0..k).map(|_| rng.uniform_range(0.5, 9.0)).collect(),
            };
            let (_, g) = concept_loss(&pred, &truth, &spec).unwrap();
            let num = finite_difference_gradient(|p| concept_loss(p, &truth, &spec).unwrap().0, &pred, 1e-6);
            assert!(relative_error(&g, &num, 1e-12) < 1e-6);
        }
    }

    #[test]
    fn softmax_cross_entropy_by_hand() {
        let (l, g) = target_loss(&[0.0, 0.0], 1.0, TargetLoss::SoftmaxCrossEntropy).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![0.5, -0.5]);
        assert!(target_loss(&[0.0, 0.0], 2.0, TargetLoss::SoftmaxCrossEntropy).is_err());
    }
}
