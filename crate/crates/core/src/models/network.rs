use serde::{Deserialize, Serialize};

use crate::error::{CbmError, Result};
use crate::numerics::RandomSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

/// Layer widths from input to output, one activation per layer, and the seed
/// used to initialize the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
}

impl NetworkSpec {
    /// Fully connected net: `hidden` layers with `hidden_activation`, identity output.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, hidden_activation: Activation, seed: u64) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        let mut activations = vec![hidden_activation; hidden.len()];
        activations.push(Activation::Identity);
        Self {
            widths,
            activations,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(CbmError::InvalidConfig("a network needs at least one layer".into()));
        }
        if self.activations.len() != self.widths.len() - 1 {
            return Err(CbmError::InvalidConfig(format!(
                "{} layers need {} activations, got {}",
                self.widths.len() - 1,
                self.widths.len() - 1,
                self.activations.len()
            )));
        }
        if self.widths.contains(&0) {
            return Err(CbmError::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }
}

/// Fully connected layer. `weights` is `input × output`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Returns `(pre-activation, output)`.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut z = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.output..(i + 1) * self.output];
            for (zo, &w) in z.iter_mut().zip(row) {
                *zo += xi * w;
            }
        }
        let a = z.iter().map(|&v| self.activation.apply(v)).collect();
        (z, a)
    }

    /// Accumulates parameter gradients into `grad` (weights then bias) and
    /// returns the gradient with respect to the layer input.
    fn backward(&self, x: &[f64], z: &[f64], a: &[f64], d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let dz: Vec<f64> = d_out
            .iter()
            .zip(z.iter().zip(a))
            .map(|(&g, (&zi, &ai))| g * self.activation.derivative(zi, ai))
            .collect();
        let (gw, gb) = grad.split_at_mut(self.weights.len());
        let mut dx = vec![0.0; self.input];
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weights[i * self.output..(i + 1) * self.output];
            let grow = &mut gw[i * self.output..(i + 1) * self.output];
            let mut acc = 0.0;
            for o in 0..self.output {
                grow[o] += xi * dz[o];
                acc += row[o] * dz[o];
            }
            dx[i] = acc;
        }
        for (b, d) in gb.iter_mut().zip(&dz) {
            *b += d;
        }
        dx
    }
}

/// Per-layer values recorded by [`Mlp::forward_trace`] for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `inputs[l]` is the input to layer `l`; the final entry is the network output.
    pub inputs: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("trace always holds the input")
    }
}

/// Feed-forward network. A network with no layers is the identity map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRecord", into = "MlpRecord")]
pub struct Mlp {
    spec: NetworkSpec,
    layers: Vec<Dense>,
}

/// Checkpoint form: the spec plus one flat parameter array.
#[derive(Serialize, Deserialize)]
struct MlpRecord {
    spec: NetworkSpec,
    params: Vec<f64>,
}

impl From<Mlp> for MlpRecord {
    fn from(m: Mlp) -> Self {
        MlpRecord {
            params: m.params(),
            spec: m.spec,
        }
    }
}

impl TryFrom<MlpRecord> for Mlp {
    type Error = CbmError;

    fn try_from(r: MlpRecord) -> Result<Self> {
        r.spec.validate()?;
        let mut m = Mlp::zeroed(&r.spec);
        m.set_params(&r.params)?;
        Ok(m)
    }
}

impl Mlp {
    /// Weights and biases drawn from `U(−1/√fan_in, 1/√fan_in)`, layer by layer.
    pub fn new(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = RandomSource::new(spec.seed);
        let mut m = Self::zeroed(spec);
        for layer in &mut m.layers {
            let bound = 1.0 / (layer.input as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = rng.uniform_range(-bound, bound);
            }
        }
        Ok(m)
    }

    pub fn zeroed(spec: &NetworkSpec) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .zip(&spec.activations)
            .map(|(w, &activation)| Dense {
                input: w[0],
                output: w[1],
                weights: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
                activation,
            })
            .collect();
        Self {
            spec: spec.clone(),
            layers,
        }
    }

    pub(crate) fn identity(width: usize) -> Self {
        Self {
            spec: NetworkSpec {
                widths: vec![width],
                activations: Vec::new(),
                seed: 0,
            },
            layers: Vec::new(),
        }
    }

    /// Layers of `first` followed by layers of `second`.
    pub(crate) fn concat(first: &Mlp, second: &Mlp) -> Self {
        let mut widths = first.spec.widths.clone();
        widths.extend_from_slice(&second.spec.widths[1..]);
        let mut activations = first.spec.activations.clone();
        activations.extend_from_slice(&second.spec.activations);
        let mut layers = first.layers.clone();
        layers.extend(second.layers.iter().cloned());
        Self {
            spec: NetworkSpec {
                widths,
                activations,
                seed: first.spec.seed,
            },
            layers,
        }
    }

    /// Splits after `at` layers.
    pub(crate) fn split(&self, at: usize) -> (Mlp, Mlp) {
        let head_spec = NetworkSpec {
            widths: self.spec.widths[..=at].to_vec(),
            activations: self.spec.activations[..at].to_vec(),
            seed: self.spec.seed,
        };
        let tail_spec = NetworkSpec {
            widths: self.spec.widths[at..].to_vec(),
            activations: self.spec.activations[at..].to_vec(),
            seed: self.spec.seed,
        };
        (
            Mlp {
                spec: head_spec,
                layers: self.layers[..at].to_vec(),
            },
            Mlp {
                spec: tail_spec,
                layers: self.layers[at..].to_vec(),
            },
        )
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> usize {
        self.spec.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.spec.widths.last().expect("spec has an input width")
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    /// All parameters, layer by layer, weights before bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(CbmError::ShapeMismatch {
                expected: self.n_params(),
                actual: params.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(CbmError::ShapeMismatch {
                expected: self.input_width(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        for l in &self.layers {
            h = l.forward(&h).1;
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_vec());
        for l in &self.layers {
            let (z, a) = l.forward(inputs.last().expect("non-empty"));
            pre.push(z);
            inputs.push(a);
        }
        Ok(Trace {
            inputs,
            pre_activations: pre,
        })
    }

    /// Backpropagates `d_out` through a recorded trace. Parameter gradients are
    /// added into `grad` (length [`Mlp::n_params`]); returns `∂L/∂input`.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.n_params());
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for l in &self.layers {
            offsets.push(offset);
            offset += l.n_params();
        }
        let mut delta = d_out.to_vec();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let g = &mut grad[offsets[idx]..offsets[idx] + l.n_params()];
            delta = l.backward(
                &trace.inputs[idx],
                &trace.pre_activations[idx],
                &trace.inputs[idx + 1],
                &delta,
                g,
            );
        }
        delta
    }

    /// Post-activation output of every layer.
    pub fn activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut t = self.forward_trace(x)?;
        t.inputs.remove(0);
        Ok(t.inputs)
    }
}
