use crate::error::Result;
use crate::models::{Connection, Mlp};

use super::loss::{concept_loss, target_loss, LossSpec};

/// One training example as seen by an [`Objective`]: the network input, the
/// true concepts and the target.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub input: &'a [f64],
    pub concepts: &'a [f64],
    pub y: f64,
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub target: f64,
    pub concept: f64,
    pub total: f64,
}

/// Differentiable training objective over `second(connect(first(x)))`.
///
/// The target loss reads the output of `second`. The concept loss reads the
/// output of `concept_head` when present, and the output of `first` otherwise.
/// Parameters are flattened as `first`, `second`, then `concept_head`.
#[derive(Debug, Clone)]
pub struct Objective {
    pub first: Mlp,
    pub second: Mlp,
    pub connection: Connection,
    pub concept_head: Option<Mlp>,
    pub target_weight: f64,
    pub concept_weight: f64,
    pub loss: LossSpec,
}

impl Objective {
    /// Concept loss on `g(x)` alone.
    pub fn concepts(g: Mlp, loss: LossSpec) -> Self {
        let k = g.output_width();
        Self {
            first: g,
            second: Mlp::identity(k),
            connection: Connection::Raw,
            concept_head: None,
            target_weight: 0.0,
            concept_weight: 1.0,
            loss,
        }
    }

    /// Target loss on `net(input)` alone.
    pub fn target(net: Mlp, loss: LossSpec) -> Self {
        let out = net.output_width();
        Self {
            first: net,
            second: Mlp::identity(out),
            connection: Connection::Raw,
            concept_head: None,
            target_weight: 1.0,
            concept_weight: 0.0,
            loss,
        }
    }

    /// `L_Y(f(connect(g(x))), y) + λ Σ_j L_Cj(g(x)_j, c_j)`.
    pub fn joint(g: Mlp, f: Mlp, connection: Connection, lambda: f64, loss: LossSpec) -> Self {
        Self {
            first: g,
            second: f,
            connection,
            concept_head: None,
            target_weight: 1.0,
            concept_weight: lambda,
            loss,
        }
    }

    pub fn multitask(trunk: Mlp, target_head: Mlp, concept_head: Mlp, lambda_mt: f64, loss: LossSpec) -> Self {
        Self {
            first: trunk,
            second: target_head,
            connection: Connection::Raw,
            concept_head: Some(concept_head),
            target_weight: 1.0,
            concept_weight: lambda_mt,
            loss,
        }
    }

    fn nets(&self) -> impl Iterator<Item = &Mlp> {
        [&self.first, &self.second].into_iter().chain(self.concept_head.as_ref())
    }

    pub fn n_params(&self) -> usize {
        self.nets().map(Mlp::n_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.nets().flat_map(|n| n.params()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let a = self.first.n_params();
        let b = self.second.n_params();
        if params.len() != self.n_params() {
            return Err(crate::error::CbmError::ShapeMismatch {
                expected: self.n_params(),
                actual: params.len(),
            });
        }
        self.first.set_params(&params[..a])?;
        self.second.set_params(&params[a..a + b])?;
        if let Some(h) = &mut self.concept_head {
            h.set_params(&params[a + b..])?;
        }
        Ok(())
    }

    fn uses_target(&self) -> bool {
        self.target_weight != 0.0
    }

    fn uses_concepts(&self) -> bool {
        self.concept_weight != 0.0
    }

    /// Loss of one example; when `grad` is given, adds `scale ×` its gradient.
    pub fn example(&self, s: &Sample, grad: Option<(&mut [f64], f64)>) -> Result<LossParts> {
        let mut parts = LossParts::default();
        let t1 = self.first.forward_trace(s.input)?;
        let h = t1.output();
        let (a, b) = (self.first.n_params(), self.second.n_params());

        let mut d_h = vec![0.0; h.len()];
        let mut grad = grad;

        if self.uses_target() {
            let z = self.connection.connect(h);
            let t2 = self.second.forward_trace(&z)?;
            let (l, d_out) = target_loss(t2.output(), s.y, self.loss.target)?;
            parts.target = l;
            if let Some((g, scale)) = grad.as_mut() {
                let d_out: Vec<f64> = d_out.iter().map(|v| v * self.target_weight * *scale).collect();
                let d_z = self.second.backward(&t2, &d_out, &mut g[a..a + b]);
                let dc = self.connection.derivative(h);
                for ((dh, dz), dc) in d_h.iter_mut().zip(&d_z).zip(&dc) {
                    *dh += dz * dc;
                }
            }
        }

        if self.uses_concepts() {
            match &self.concept_head {
                None => {
                    let (l, d_c) = concept_loss(h, s.concepts, &self.loss)?;
                    parts.concept = l;
                    if let Some((_, scale)) = grad.as_ref() {
                        for (dh, dc) in d_h.iter_mut().zip(&d_c) {
                            *dh += dc * self.concept_weight * *scale;
                        }
                    }
                }
                Some(head) => {
                    let t3 = head.forward_trace(h)?;
                    let (l, d_c) = concept_loss(t3.output(), s.concepts, &self.loss)?;
                    parts.concept = l;
                    if let Some((g, scale)) = grad.as_mut() {
                        let d_c: Vec<f64> = d_c.iter().map(|v| v * self.concept_weight * *scale).collect();
                        let back = head.backward(&t3, &d_c, &mut g[a + b..]);
                        for (dh, v) in d_h.iter_mut().zip(&back) {
                            *dh += v;
                        }
                    }
                }
            }
        }

        if let Some((g, _)) = grad {
            self.first.backward(&t1, &d_h, &mut g[..a]);
        }
        parts.total = self.combine(parts.target, parts.concept);
        Ok(parts)
    }

    fn combine(&self, target: f64, concept: f64) -> f64 {
        let mut total = 0.0;
        if self.uses_target() {
            total += self.target_weight * target;
        }
        if self.uses_concepts() {
            total += self.concept_weight * concept;
        }
        total
    }

    /// Mean loss over `samples`, in order.
    pub fn mean_loss(&self, samples: &[Sample]) -> Result<LossParts> {
        self.accumulate(samples, None)
    }

    /// Mean loss and its gradient over `samples`, in order.
    pub fn loss_and_gradient(&self, samples: &[Sample]) -> Result<(LossParts, Vec<f64>)> {
        let mut grad = vec![0.0; self.n_params()];
        let parts = self.accumulate(samples, Some(&mut grad))?;
        Ok((parts, grad))
    }

    fn accumulate(&self, samples: &[Sample], mut grad: Option<&mut Vec<f64>>) -> Result<LossParts> {
        let n = samples.len().max(1) as f64;
        let scale = 1.0 / n;
        let (mut target, mut concept) = (0.0, 0.0);
        for s in samples {
            let p = self.example(s, grad.as_mut().map(|g| (g.as_mut_slice(), scale)))?;
            target += p.target;
            concept += p.concept;
        }
        let (target, concept) = (target / n, concept / n);
        Ok(LossParts {
            target,
            concept,
            total: self.combine(target, concept),
        })
    }
}
