//! Datasets, synthetic generators, concept processing and CSV ingestion.

pub(crate) mod generate;
pub(crate) mod io;
mod process;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{CbmError, Result};
use crate::numerics::Matrix;

pub use generate::{
    generate_linear_gaussian, generate_nonlinear_concepts, generate_species_task, species_world,
    NonlinearConfig, ShiftConfig, SpeciesWorld,
};
pub use io::{load_csv, load_manifest, save_csv, save_manifest, Manifest};
pub use process::{
    filter_sparse_concepts, majority_vote_concepts, majority_vote_table, project_concepts, subsample,
    truncate_fractional_grades, zscore_concepts, ConceptStats, FilterMode, FilterOutcome,
    TruncationReport, CLASS_FILTER_MIN_CLASSES, INSTANCE_FILTER_THRESHOLD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Binary,
    Ordinal,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub kind: ConceptKind,
    pub group: usize,
}

/// Names, kinds and groups of the `k` bottleneck concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSchema {
    pub concepts: Vec<ConceptSpec>,
    /// Whether examples may mark concepts as not visible.
    #[serde(default)]
    pub visibility_aware: bool,
}

impl ConceptSchema {
    pub fn new(concepts: Vec<ConceptSpec>, visibility_aware: bool) -> Result<Self> {
        let schema = Self {
            concepts,
            visibility_aware,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// `k` concepts of one kind, each in its own group, named `{prefix}{j}`.
    pub fn uniform(k: usize, kind: ConceptKind, prefix: &str) -> Self {
        Self {
            concepts: (0..k)
                .map(|j| ConceptSpec {
                    name: format!("{prefix}{j}"),
                    kind,
                    group: j,
                })
                .collect(),
            visibility_aware: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(CbmError::InvalidDataset("schema needs at least one concept".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.concepts {
            if !seen.insert(c.name.as_str()) {
                return Err(CbmError::InvalidDataset(format!("duplicate concept name {}", c.name)));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.concepts.len()
    }

    /// Concept indices per group id, groups in ascending id order.
    pub fn groups(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (j, c) in self.concepts.iter().enumerate() {
            groups.entry(c.group).or_default().push(j);
        }
        groups
    }

    pub fn all_binary(&self) -> bool {
        self.concepts.iter().all(|c| c.kind == ConceptKind::Binary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification { n_classes: usize },
}

impl Task {
    pub fn is_classification(&self) -> bool {
        matches!(self, Task::Classification { .. })
    }

    /// Width of the target predictor's output.
    pub fn output_width(&self) -> usize {
        match self {
            Task::Regression => 1,
            Task::Classification { n_classes } => *n_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = CbmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CbmError::InvalidConfig(format!("unknown split {other}"))),
        }
    }
}

/// One `(x, c, y)` point. For classification `y` holds the class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub x: Vec<f64>,
    pub c: Vec<f64>,
    pub visibility: Vec<bool>,
    pub y: f64,
}

impl LabeledExample {
    pub fn new(x: Vec<f64>, c: Vec<f64>, y: f64) -> Self {
        let visibility = vec![true; c.len()];
        Self { x, c, visibility, y }
    }

    pub fn label(&self) -> usize {
        self.y as usize
    }
}

/// Immutable collection of examples sharing one schema and task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    schema: ConceptSchema,
    task: Task,
    split: Split,
    examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(
        schema: ConceptSchema,
        task: Task,
        split: Split,
        examples: Vec<LabeledExample>,
    ) -> Result<Self> {
        let ds = Self {
            schema,
            task,
            split,
            examples,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks every dataset invariant.
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let k = self.schema.k();
        let d = self.examples.first().map_or(0, |e| e.x.len());
        for (i, e) in self.examples.iter().enumerate() {
            if e.x.len() != d || e.c.len() != k || e.visibility.len() != k {
                return Err(CbmError::InvalidDataset(format!(
                    "example {i}: expected d={d}, k={k}, got x={}, c={}, visibility={}",
                    e.x.len(),
                    e.c.len(),
                    e.visibility.len()
                )));
            }
            if !e.x.iter().chain(&e.c).all(|v| v.is_finite()) || !e.y.is_finite() {
                return Err(CbmError::InvalidDataset(format!("example {i}: non-finite value")));
            }
            for (j, spec) in self.schema.concepts.iter().enumerate() {
                if spec.kind == ConceptKind::Binary && e.c[j] != 0.0 && e.c[j] != 1.0 {
                    return Err(CbmError::InvalidDataset(format!(
                        "example {i}: binary concept {} has value {}",
                        spec.name, e.c[j]
                    )));
                }
            }
            if !self.schema.visibility_aware && e.visibility.iter().any(|v| !v) {
                return Err(CbmError::InvalidDataset(format!(
                    "example {i}: hidden concept in a schema without visibility"
                )));
            }
            if let Task::Classification { n_classes } = self.task {
                if e.y.fract() != 0.0 || e.y < 0.0 || e.y >= n_classes as f64 {
                    return Err(CbmError::InvalidDataset(format!(
                        "example {i}: class id {} outside [0, {n_classes})",
                        e.y
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> &ConceptSchema {
        &self.schema
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn d(&self) -> usize {
        self.examples.first().map_or(0, |e| e.x.len())
    }

    pub fn k(&self) -> usize {
        self.schema.k()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Examples at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            task: self.task,
            split: self.split,
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    pub fn x_matrix(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.examples.iter().map(|e| e.x.as_slice()).collect();
        Matrix::from_rows(&rows).expect("validated dataset is rectangular")
    }

    pub fn c_matrix(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.examples.iter().map(|e| e.c.as_slice()).collect();
        Matrix::from_rows(&rows).expect("validated dataset is rectangular")
    }

    pub fn targets(&self) -> Vec<f64> {
        self.examples.iter().map(|e| e.y).collect()
    }

    /// Replaces the examples, keeping schema, task and split. Re-validates.
    pub fn with_examples(&self, examples: Vec<LabeledExample>) -> Result<Dataset> {
        Dataset::new(self.schema.clone(), self.task, self.split, examples)
    }

    pub(crate) fn from_parts_unchecked(
        schema: ConceptSchema,
        task: Task,
        split: Split,
        examples: Vec<LabeledExample>,
    ) -> Dataset {
        Dataset {
            schema,
            task,
            split,
            examples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema2() -> ConceptSchema {
        ConceptSchema::uniform(2, ConceptKind::Binary, "c")
    }

    #[test]
    fn rejects_duplicate_names() {
        let mut s = schema2();
        s.concepts[1].name = "c0".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn rejects_non_binary_value() {
        let ex = LabeledExample::new(vec![0.0], vec![0.0, 0.5], 0.0);
        assert!(Dataset::new(schema2(), Task::Regression, Split::Train, vec![ex]).is_err());
    }

    #[test]
    fn rejects_hidden_concept_without_visibility_schema() {
        let mut ex = LabeledExample::new(vec![0.0], vec![0.0, 1.0], 0.0);
        ex.visibility[0] = false;
        let mut schema = schema2();
        assert!(Dataset::new(schema.clone(), Task::Regression, Split::Train, vec![ex.clone()]).is_err());
        schema.visibility_aware = true;
        assert!(Dataset::new(schema, Task::Regression, Split::Train, vec![ex]).is_ok());
    }

    #[test]
    fn rejects_class_out_of_range() {
        let ex = LabeledExample::new(vec![0.0], vec![0.0, 1.0], 3.0);
        let task = Task::Classification { n_classes: 3 };
        assert!(Dataset::new(schema2(), task, Split::Train, vec![ex]).is_err());
    }

    #[test]
    fn groups_are_ordered() {
        let mut s = ConceptSchema::uniform(4, ConceptKind::Binary, "c");
        s.concepts[0].group = 5;
        s.concepts[1].group = 2;
        s.concepts[2].group = 5;
        s.concepts[3].group = 2;
        let g: Vec<(usize, Vec<usize>)> = s.groups().into_iter().collect();
        assert_eq!(g, vec![(2, vec![1, 3]), (5, vec![0, 2])]);
    }
}
