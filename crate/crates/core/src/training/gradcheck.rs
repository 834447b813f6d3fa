//! Randomized analytic-vs-numeric gradient checks over every objective shape.

use serde::{Deserialize, Serialize};

use super::loss::{ConceptLoss, LossSpec, TargetLoss};
use super::objective::{Objective, Sample};
use crate::error::Result;
use crate::models::{Activation, Connection, Mlp, NetworkSpec};
use crate::numerics::{finite_difference_gradient, relative_error, RandomSource};

/// Objective shapes cycled through by [`random_gradient_checks`].
const SHAPES: [&str; 9] = [
    "concepts/squared_error",
    "concepts/weighted_bce",
    "target/squared_error",
    "target/softmax_cross_entropy",
    "joint/raw/squared_error",
    "joint/logits/softmax_cross_entropy",
    "joint/probabilities/softmax_cross_entropy",
    "multitask/squared_error",
    "multitask/softmax_cross_entropy",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub case: String,
    pub n_params: usize,
    pub batch: usize,
    pub relative_error: f64,
}

fn random_net(rng: &mut RandomSource, input: usize, output: usize) -> Result<Mlp> {
    let acts = [Activation::Sigmoid, Activation::Identity, Activation::Relu];
    let hidden: Vec<usize> = (0..rng.index(3)).map(|_| 2 + rng.index(5)).collect();
    let act = acts[rng.index(acts.len())];
    Mlp::new(&NetworkSpec::mlp(input, &hidden, output, act, rng.next_u64()))
}

/// Runs `n_cases` checks, cycling through all objective shapes with random
/// widths, depths, activations, batch sizes and data. Central differences use
/// step `1e-6`.
pub fn random_gradient_checks(n_cases: usize, seed: u64) -> Result<Vec<GradientCheck>> {
    let mut rng = RandomSource::new(seed);
    (0..n_cases)
        .map(|i| {
            let shape = SHAPES[i % SHAPES.len()];
            let d = 1 + rng.index(5);
            let k = 1 + rng.index(4);
            let n_classes = 2 + rng.index(3);
            let batch = 1 + rng.index(6);
            let classify = shape.ends_with("cross_entropy") || shape.ends_with("bce");
            let out = if classify { n_classes } else { 1 };
            let concept_kind = if classify { ConceptLoss::WeightedBce } else { ConceptLoss::SquaredError };
            let loss = LossSpec {
                target: if classify { TargetLoss::SoftmaxCrossEntropy } else { TargetLoss::SquaredError },
                concepts: vec![concept_kind; k],
                positive_weights: (0..k).map(|_| 0.2 + 4.0 * rng.uniform()).collect(),
            };
            let lambda = 0.1 + 2.0 * rng.uniform();
            let obj = match shape.split('/').next().unwrap_or_default() {
                "concepts" => Objective::concepts(random_net(&mut rng, d, k)?, loss),
                "target" => Objective::target(random_net(&mut rng, d, out)?, loss),
                "joint" => {
                    let connection = match shape {
                        "joint/raw/squared_error" => Connection::Raw,
                        "joint/logits/softmax_cross_entropy" => Connection::Logits,
                        _ => Connection::Probabilities,
                    };
                    let g = random_net(&mut rng, d, k)?;
                    let f = random_net(&mut rng, k, out)?;
                    Objective::joint(g, f, connection, lambda, loss)
                }
                _ => {
                    let width = 2 + rng.index(4);
                    let trunk = random_net(&mut rng, d, width)?;
                    let head = random_net(&mut rng, width, out)?;
                    let chead = Mlp::new(&NetworkSpec::mlp(width, &[], k, Activation::Identity, rng.next_u64()))?;
                    Objective::multitask(trunk, head, chead, lambda, loss)
                }
            };
            let xs: Vec<Vec<f64>> = (0..batch).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
            let cs: Vec<Vec<f64>> = (0..batch)
                .map(|_| {
                    (0..k)
                        .map(|_| if classify { f64::from(rng.bernoulli(0.5)) } else { rng.normal() })
                        .collect()
                })
                .collect();
            let ys: Vec<f64> = (0..batch)
                .map(|_| if classify { rng.index(n_classes) as f64 } else { rng.normal() })
                .collect();
            let samples: Vec<Sample> = (0..batch)
                .map(|b| Sample {
                    input: &xs[b],
                    concepts: &cs[b],
                    y: ys[b],
                })
                .collect();
            let (_, analytic) = obj.loss_and_gradient(&samples)?;
            let numeric = finite_difference_gradient(
                |p| {
                    let mut probe = obj.clone();
                    probe.set_params(p).expect("parameter count is fixed");
                    probe.mean_loss(&samples).map_or(f64::NAN, |l| l.total)
                },
                &obj.params(),
                1e-6,
            );
            Ok(GradientCheck {
                case: format!("{shape} d={d} k={k} batch={batch}"),
                n_params: obj.n_params(),
                batch,
                relative_error: relative_error(&analytic, &numeric, 1e-10),
            })
        })
        .collect()
}
