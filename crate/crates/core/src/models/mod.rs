//! Feed-forward networks and the three model families built from them:
//! bottleneck `f(g(x))`, standard `x → y`, and multitask (shared trunk with a
//! concept head and a target head).

mod network;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{CbmError, Result};

pub use network::{sigmoid, Activation, Dense, Mlp, NetworkSpec, Trace};

/// How the concept predictor's output reaches the target predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connection {
    /// Real-valued concept scores, passed unchanged (regression).
    Raw,
    /// Concept logits, passed unchanged (classification).
    Logits,
    /// Concept logits squashed by a sigmoid before `f` (classification).
    Probabilities,
}

impl Connection {
    pub fn connect(self, scores: &[f64]) -> Vec<f64> {
        match self {
            Connection::Raw | Connection::Logits => scores.to_vec(),
            Connection::Probabilities => scores.iter().map(|&s| sigmoid(s)).collect(),
        }
    }

    /// `∂ connect(s) / ∂ s`, element-wise.
    pub fn derivative(self, scores: &[f64]) -> Vec<f64> {
        match self {
            Connection::Raw | Connection::Logits => vec![1.0; scores.len()],
            Connection::Probabilities => scores
                .iter()
                .map(|&s| {
                    let p = sigmoid(s);
                    p * (1.0 - p)
                })
                .collect(),
        }
    }

    /// Default wiring for a task.
    pub fn for_task(task: Task) -> Self {
        if task.is_classification() {
            Connection::Logits
        } else {
            Connection::Raw
        }
    }

    pub fn check_task(self, task: Task) -> Result<()> {
        let ok = match self {
            Connection::Raw => !task.is_classification(),
            Connection::Logits | Connection::Probabilities => task.is_classification(),
        };
        if ok {
            Ok(())
        } else {
            Err(CbmError::InvalidConfig(format!(
                "connection {self:?} is not valid for task {task:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    Independent,
    Sequential,
    Joint { lambda: f64 },
}

/// Hidden layer shapes used to build `g`, `f` and the baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    #[serde(default = "default_concept_hidden")]
    pub concept_hidden: Vec<usize>,
    /// `None` picks the task default: two layers of 50 for regression,
    /// a single linear layer for classification.
    #[serde(default)]
    pub target_hidden: Option<Vec<usize>>,
    #[serde(default = "default_hidden_activation")]
    pub hidden_activation: Activation,
}

fn default_concept_hidden() -> Vec<usize> {
    vec![64]
}

fn default_hidden_activation() -> Activation {
    Activation::Relu
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            concept_hidden: default_concept_hidden(),
            target_hidden: None,
            hidden_activation: default_hidden_activation(),
        }
    }
}

impl Architecture {
    pub fn target_hidden_for(&self, task: Task) -> Vec<usize> {
        match &self.target_hidden {
            Some(h) => h.clone(),
            None if task.is_classification() => Vec::new(),
            None => vec![50, 50],
        }
    }

    pub fn concept_spec(&self, d: usize, k: usize, seed: u64) -> NetworkSpec {
        NetworkSpec::mlp(d, &self.concept_hidden, k, self.hidden_activation, seed)
    }

    pub fn target_spec(&self, k: usize, task: Task, seed: u64) -> NetworkSpec {
        NetworkSpec::mlp(
            k,
            &self.target_hidden_for(task),
            task.output_width(),
            self.hidden_activation,
            seed,
        )
    }

    /// The `g` and `f` hidden layers back to back, with no width-`k` layer.
    pub fn unconstrained_spec(&self, d: usize, task: Task, seed: u64) -> NetworkSpec {
        let mut hidden = self.concept_hidden.clone();
        hidden.extend(self.target_hidden_for(task));
        NetworkSpec::mlp(d, &hidden, task.output_width(), self.hidden_activation, seed)
    }
}

/// Seed offset separating the initialization of `f` from that of `g`.
pub const TARGET_SEED_OFFSET: u64 = 1;

/// `ŷ = f(connect(g(x)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckModel {
    pub g: Mlp,
    pub f: Mlp,
    pub connection: Connection,
    pub regime: Regime,
    pub task: Task,
}

impl BottleneckModel {
    pub fn new(g: Mlp, f: Mlp, connection: Connection, regime: Regime, task: Task) -> Result<Self> {
        let m = Self {
            g,
            f,
            connection,
            regime,
            task,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.g.output_width() != self.f.input_width() {
            return Err(CbmError::ShapeMismatch {
                expected: self.g.output_width(),
                actual: self.f.input_width(),
            });
        }
        if self.f.output_width() != self.task.output_width() {
            return Err(CbmError::ShapeMismatch {
                expected: self.task.output_width(),
                actual: self.f.output_width(),
            });
        }
        self.connection.check_task(self.task)
    }

    pub fn k(&self) -> usize {
        self.g.output_width()
    }

    pub fn d(&self) -> usize {
        self.g.input_width()
    }

    /// Concept scores (regression) or logits (classification).
    pub fn forward_concepts(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.g.forward(x)
    }

    /// `P(c_j = 1) = σ(ℓ̂_j)`.
    pub fn concept_probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_concepts(x)?.iter().map(|&l| sigmoid(l)).collect())
    }

    /// The vector `f` actually reads for input `x`.
    pub fn target_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.connection.connect(&self.forward_concepts(x)?))
    }

    pub fn predict_from_concepts(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.f.forward(input)
    }

    pub fn forward_target(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.predict_from_concepts(&self.target_input(x)?)
    }

    pub fn n_layers(&self) -> usize {
        self.g.n_layers() + self.f.n_layers()
    }

    /// Layers are numbered through `g` and then `f`. The last layer of `g`
    /// yields the concept scores before the connection is applied.
    pub fn hidden_activations(&self, x: &[f64], layer: usize) -> Result<Vec<f64>> {
        check_layer(layer, self.n_layers())?;
        let mut acts = self.g.activations(x)?;
        if layer < acts.len() {
            return Ok(acts.swap_remove(layer));
        }
        let input = self.connection.connect(acts.last().expect("g has a layer"));
        let mut f_acts = self.f.activations(&input)?;
        Ok(f_acts.swap_remove(layer - self.g.n_layers()))
    }
}

/// Direct `x → y` network, with or without a width-`k` layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardModel {
    pub net: Mlp,
    /// Width of the bottleneck-sized layer, if the architecture has one.
    pub bottleneck_width: Option<usize>,
    pub task: Task,
}

impl StandardModel {
    pub fn forward_target(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(x)
    }

    pub fn n_layers(&self) -> usize {
        self.net.n_layers()
    }

    pub fn hidden_activations(&self, x: &[f64], layer: usize) -> Result<Vec<f64>> {
        check_layer(layer, self.n_layers())?;
        Ok(self.net.activations(x)?.swap_remove(layer))
    }
}

/// Shared trunk feeding a target head and an auxiliary concept head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultitaskModel {
    pub trunk: Mlp,
    pub target_head: Mlp,
    pub concept_head: Mlp,
    pub lambda_mt: f64,
    pub task: Task,
}

impl MultitaskModel {
    pub fn forward_target(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.target_head.forward(&self.trunk.forward(x)?)
    }

    /// Auxiliary concept predictions; they do not feed the target head.
    pub fn forward_concepts(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.concept_head.forward(&self.trunk.forward(x)?)
    }

    pub fn n_layers(&self) -> usize {
        self.trunk.n_layers() + self.target_head.n_layers()
    }

    pub fn hidden_activations(&self, x: &[f64], layer: usize) -> Result<Vec<f64>> {
        check_layer(layer, self.n_layers())?;
        let mut acts = self.trunk.activations(x)?;
        if layer < acts.len() {
            return Ok(acts.swap_remove(layer));
        }
        let last = acts.pop().expect("trunk has a layer");
        Ok(self.target_head.activations(&last)?.swap_remove(layer - self.trunk.n_layers()))
    }
}

fn check_layer(layer: usize, n: usize) -> Result<()> {
    if layer >= n {
        return Err(CbmError::IndexOutOfRange { index: layer, limit: n });
    }
    Ok(())
}

/// Any trained model, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Model {
    Bottleneck(BottleneckModel),
    Standard(StandardModel),
    Multitask(MultitaskModel),
}

impl Model {
    pub fn task(&self) -> Task {
        match self {
            Model::Bottleneck(m) => m.task,
            Model::Standard(m) => m.task,
            Model::Multitask(m) => m.task,
        }
    }

    pub fn forward_target(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Model::Bottleneck(m) => m.forward_target(x),
            Model::Standard(m) => m.forward_target(x),
            Model::Multitask(m) => m.forward_target(x),
        }
    }

    /// Concept predictions, if the model makes any.
    pub fn forward_concepts(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        match self {
            Model::Bottleneck(m) => m.forward_concepts(x).map(Some),
            Model::Standard(_) => Ok(None),
            Model::Multitask(m) => m.forward_concepts(x).map(Some),
        }
    }

    pub fn n_layers(&self) -> usize {
        match self {
            Model::Bottleneck(m) => m.n_layers(),
            Model::Standard(m) => m.n_layers(),
            Model::Multitask(m) => m.n_layers(),
        }
    }

    pub fn hidden_activations(&self, x: &[f64], layer: usize) -> Result<Vec<f64>> {
        match self {
            Model::Bottleneck(m) => m.hidden_activations(x, layer),
            Model::Standard(m) => m.hidden_activations(x, layer),
            Model::Multitask(m) => m.hidden_activations(x, layer),
        }
    }

    pub fn as_bottleneck(&self) -> Result<&BottleneckModel> {
        match self {
            Model::Bottleneck(m) => Ok(m),
            Model::Standard(_) => Err(CbmError::NotInterventable("standard model".into())),
            Model::Multitask(_) => Err(CbmError::NotInterventable(
                "multitask concept head does not feed the target".into(),
            )),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Model = serde_json::from_str(text)?;
        if let Model::Bottleneck(b) = &model {
            b.validate()?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Predicted class: first index of the largest score.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
