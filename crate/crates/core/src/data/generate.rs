use serde::{Deserialize, Serialize};

use super::{ConceptKind, ConceptSchema, Dataset, LabeledExample, Split, Task};
use crate::error::{CbmError, Result};
use crate::numerics::{random_orthonormal_columns, sample_gaussian_matrix, Matrix, RandomSource};
use crate::theory::LinearSetting;

/// Draws `n` points from `X ~ N(0, σX² I)`, `C = XB + ε₁`, `Y = C·b + ε₂`.
///
/// The draw order is fixed: all of `X` row by row, then all of `ε₁`, then `ε₂`.
pub fn generate_linear_gaussian(
    setting: &LinearSetting,
    n: usize,
    rng: &mut RandomSource,
) -> Result<Dataset> {
    if n == 0 {
        return Err(CbmError::InvalidConfig("n must be at least 1".into()));
    }
    let (x, c, y) = linear_gaussian_arrays(setting, n, rng)?;
    let examples = (0..n)
        .map(|i| LabeledExample::new(x.row(i).to_vec(), c.row(i).to_vec(), y[i]))
        .collect();
    let schema = ConceptSchema::uniform(setting.k(), ConceptKind::Continuous, "c");
    Ok(Dataset::from_parts_unchecked(
        schema,
        Task::Regression,
        Split::Train,
        examples,
    ))
}

/// Matrix form of [`generate_linear_gaussian`], used directly by the Monte Carlo oracle.
pub(crate) fn linear_gaussian_arrays(
    setting: &LinearSetting,
    n: usize,
    rng: &mut RandomSource,
) -> Result<(Matrix, Matrix, Vec<f64>)> {
    setting.validate()?;
    let x = sample_gaussian_matrix(n, setting.d(), setting.sigma_x2().sqrt(), rng);
    let eps1 = sample_gaussian_matrix(n, setting.k(), setting.sigma_c2().sqrt(), rng);
    let eps2 = sample_gaussian_matrix(n, 1, setting.sigma_y2().sqrt(), rng);
    let mut c = x.matmul(setting.concept_map())?;
    for (ci, ei) in c.as_mut_slice().iter_mut().zip(eps1.as_slice()) {
        *ci += ei;
    }
    let mut y = c.matvec(setting.concept_weights())?;
    for (yi, ei) in y.iter_mut().zip(eps2.as_slice()) {
        *yi += ei;
    }
    Ok((x, c, y))
}

fn default_signal_noise() -> f64 {
    1.0
}

fn default_group_size() -> usize {
    1
}

/// Species-style classification task with a spurious background cue.
///
/// Features are `d_signal` signal columns followed by `d_background`
/// background columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub n_classes: usize,
    pub n_concepts: usize,
    pub d_signal: usize,
    pub d_background: usize,
    /// Probability that an example's concept label is flipped.
    pub concept_noise: f64,
    /// Norm of each class's background prototype; background noise has unit variance.
    pub background_strength: f64,
    /// Standard deviation of the noise added to the signal embedding.
    #[serde(default = "default_signal_noise")]
    pub signal_noise: f64,
    /// Consecutive concepts sharing a group id.
    #[serde(default = "default_group_size")]
    pub concepts_per_group: usize,
    /// Seeds class signatures, signal embedding, background prototypes and the shifted mapping.
    pub mapping_seed: u64,
}

impl ShiftConfig {
    pub fn d(&self) -> usize {
        self.d_signal + self.d_background
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CbmError::InvalidConfig(m.to_string()));
        if self.n_classes < 2 {
            return bad("species task needs at least 2 classes");
        }
        if self.n_concepts == 0 || self.d_signal < self.n_concepts {
            return bad("need 1 <= n_concepts <= d_signal");
        }
        if !(0.0..=1.0).contains(&self.concept_noise) {
            return bad("concept_noise must lie in [0, 1]");
        }
        if !(self.background_strength >= 0.0) || !(self.signal_noise >= 0.0) {
            return bad("background_strength and signal_noise must be non-negative");
        }
        if self.concepts_per_group == 0 {
            return bad("concepts_per_group must be positive");
        }
        Ok(())
    }
}

/// The fixed part of a species task, derived from `mapping_seed` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesWorld {
    /// Class-level binary concept signature per class.
    pub signatures: Vec<Vec<f64>>,
    /// `d_signal × n_concepts`, orthonormal columns.
    pub embedding: Matrix,
    /// Background prototype per class (rows), each of norm `background_strength`.
    pub backgrounds: Matrix,
    /// Background used by class `y` under shift: `backgrounds.row(shifted[y])`.
    /// A derangement, so every class loses its training background.
    pub shifted: Vec<usize>,
}

const SIGNATURE_RETRIES: usize = 1000;

pub fn species_world(config: &ShiftConfig) -> Result<SpeciesWorld> {
    config.validate()?;
    let mut rng = RandomSource::new(config.mapping_seed);
    let mut signatures: Vec<Vec<f64>> = Vec::with_capacity(config.n_classes);
    for class in 0..config.n_classes {
        let mut attempt = 0;
        loop {
            let s: Vec<f64> = (0..config.n_concepts)
                .map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 })
                .collect();
            if !signatures.contains(&s) {
                signatures.push(s);
                break;
            }
            attempt += 1;
            if attempt >= SIGNATURE_RETRIES {
                return Err(CbmError::InvalidConfig(format!(
                    "could not draw a distinct signature for class {class} \
                     ({} concepts cannot separate {} classes)",
                    config.n_concepts, config.n_classes
                )));
            }
        }
    }
    let embedding = random_orthonormal_columns(config.d_signal, config.n_concepts, &mut rng)?;
    let mut backgrounds = sample_gaussian_matrix(config.n_classes, config.d_background, 1.0, &mut rng);
    for i in 0..config.n_classes {
        let row = backgrounds.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in row.iter_mut() {
            *v = if norm > 0.0 { *v / norm * config.background_strength } else { 0.0 };
        }
    }
    let shifted = loop {
        let p = rng.permutation(config.n_classes);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            break p;
        }
    };
    Ok(SpeciesWorld {
        signatures,
        embedding,
        backgrounds,
        shifted,
    })
}

/// Generates `n_per_class` examples for every class.
///
/// Signal columns are `embedding · (2s − 1) + N(0, signal_noise²)` for class
/// signature `s`; background columns are the class's prototype plus unit
/// Gaussian noise. With `shifted` the class→prototype mapping is replaced by
/// the world's derangement. Per-example draws happen in the same order either
/// way, so shifted and unshifted sets from the same `rng` seed differ only in
/// which prototype is added to the background columns.
pub fn generate_species_task(
    config: &ShiftConfig,
    n_per_class: usize,
    shifted: bool,
    rng: &mut RandomSource,
) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(CbmError::InvalidConfig("n_per_class must be at least 1".into()));
    }
    let world = species_world(config)?;
    let mut examples = Vec::with_capacity(config.n_classes * n_per_class);
    for class in 0..config.n_classes {
        let sig = &world.signatures[class];
        let centered: Vec<f64> = sig.iter().map(|s| 2.0 * s - 1.0).collect();
        let signal_mean = world.embedding.matvec(&centered)?;
        let proto = if shifted {
            world.backgrounds.row(world.shifted[class])
        } else {
            world.backgrounds.row(class)
        };
        for _ in 0..n_per_class {
            let mut x = Vec::with_capacity(config.d());
            for m in &signal_mean {
                x.push(m + config.signal_noise * rng.normal());
            }
            for p in proto {
                x.push(p + rng.normal());
            }
            let c = sig
                .iter()
                .map(|&s| if rng.bernoulli(config.concept_noise) { 1.0 - s } else { s })
                .collect();
            examples.push(LabeledExample::new(x, c, class as f64));
        }
    }
    let mut schema = ConceptSchema::uniform(config.n_concepts, ConceptKind::Binary, "a");
    for (j, c) in schema.concepts.iter_mut().enumerate() {
        c.group = j / config.concepts_per_group;
    }
    Ok(Dataset::from_parts_unchecked(
        schema,
        Task::Classification {
            n_classes: config.n_classes,
        },
        Split::Train,
        examples,
    ))
}

/// Regression task whose concepts are products of two linear projections of `x`.
///
/// `c_j = (a_jᵀx)(a'_jᵀx) + N(0, concept_noise²)` and `y = c·b + N(0, target_noise²)`
/// with unit vectors `a_j`, `a'_j`, `b` drawn from `mapping_seed` and `x ~ N(0, I_d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearConfig {
    pub d: usize,
    pub k: usize,
    pub concept_noise: f64,
    pub target_noise: f64,
    pub mapping_seed: u64,
}

pub fn generate_nonlinear_concepts(
    config: &NonlinearConfig,
    n: usize,
    rng: &mut RandomSource,
) -> Result<Dataset> {
    if config.d == 0 || config.k == 0 || n == 0 {
        return Err(CbmError::InvalidConfig("d, k and n must be positive".into()));
    }
    let mut world = RandomSource::new(config.mapping_seed);
    let unit = |rng: &mut RandomSource, len: usize| -> Vec<f64> {
        let v: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.into_iter().map(|a| a / norm).collect()
    };
    let left: Vec<Vec<f64>> = (0..config.k).map(|_| unit(&mut world, config.d)).collect();
    let right: Vec<Vec<f64>> = (0..config.k).map(|_| unit(&mut world, config.d)).collect();
    let weights = unit(&mut world, config.k);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();

    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..config.d).map(|_| rng.normal()).collect();
        let c: Vec<f64> = (0..config.k)
            .map(|j| dot(&left[j], &x) * dot(&right[j], &x) + config.concept_noise * rng.normal())
            .collect();
        let y = dot(&c, &weights) + config.target_noise * rng.normal();
        examples.push(LabeledExample::new(x, c, y));
    }
    Ok(Dataset::from_parts_unchecked(
        ConceptSchema::uniform(config.k, ConceptKind::Continuous, "c"),
        Task::Regression,
        Split::Train,
        examples,
    ))
}
