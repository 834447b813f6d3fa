//! Experiment configuration files.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cbm_core::data::{NonlinearConfig, ShiftConfig};
use cbm_core::training::TrainConfig;

use crate::{BenchError, Result};

/// Where each seed's train/val/test splits come from.
///
/// Generated sources draw all splits from `RandomSource::new(seed)` in the
/// order train, val, test. Species and nonlinear tasks add the seed to their
/// `mapping_seed`, so every seed sees a fresh world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// A random linear-Gaussian setting is drawn first, then the data.
    LinearGaussian {
        d: usize,
        k: usize,
        sigma_x: f64,
        sigma_c: f64,
        sigma_y: f64,
        n_train: usize,
        n_val: usize,
        n_test: usize,
    },
    /// The test split and the shifted test split use identical draws
    /// (`RandomSource::with_stream(seed, 1)`) and differ only in background.
    Species {
        task: ShiftConfig,
        n_train_per_class: usize,
        n_val_per_class: usize,
        n_test_per_class: usize,
    },
    Nonlinear {
        task: NonlinearConfig,
        n_train: usize,
        n_val: usize,
        n_test: usize,
    },
    /// Fixed files; seeds only change training.
    Csv {
        manifest: PathBuf,
        train: PathBuf,
        val: PathBuf,
        test: PathBuf,
        #[serde(default)]
        shifted_test: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub name: String,
    pub train: TrainConfig,
}

fn default_fractions() -> Vec<f64> {
    vec![0.1, 0.25, 0.5, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataEfficiencyOptions {
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    /// Subsample per class (classification only).
    #[serde(default)]
    pub stratified: bool,
}

impl Default for DataEfficiencyOptions {
    fn default() -> Self {
        Self {
            fractions: default_fractions(),
            stratified: false,
        }
    }
}

fn default_p_low() -> f64 {
    0.05
}

fn default_p_high() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOptions {
    #[serde(default = "default_p_low")]
    pub p_low: f64,
    #[serde(default = "default_p_high")]
    pub p_high: f64,
}

impl Default for InterventionOptions {
    fn default() -> Self {
        Self {
            p_low: default_p_low(),
            p_high: default_p_high(),
        }
    }
}

/// A linear-Gaussian setting family; `B` and `b` are drawn from each seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSpec {
    pub d: usize,
    pub k: usize,
    pub sigma_x: f64,
    pub sigma_c: f64,
    pub sigma_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TheoryOptions {
    #[serde(default)]
    pub settings: Vec<SettingSpec>,
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default)]
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: Option<DataSource>,
    #[serde(default)]
    pub roster: Vec<RosterEntry>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub data_efficiency: DataEfficiencyOptions,
    #[serde(default)]
    pub intervention: InterventionOptions,
    #[serde(default)]
    pub theory: TheoryOptions,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| BenchError::Config(e.to_string()))
    }

    fn check_common(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(BenchError::Config("seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Checks what every training experiment needs: data, a non-empty roster
    /// with unique names, and valid training configs.
    pub fn validate_training(&self) -> Result<&DataSource> {
        self.check_common()?;
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| BenchError::Config("config has no data source".into()))?;
        if self.roster.is_empty() {
            return Err(BenchError::Config("roster must not be empty".into()));
        }
        let mut names = HashSet::new();
        for entry in &self.roster {
            if !names.insert(entry.name.as_str()) {
                return Err(BenchError::Config(format!("duplicate roster name {}", entry.name)));
            }
            entry
                .train
                .validate()
                .map_err(|e| BenchError::Config(format!("{}: {e}", entry.name)))?;
        }
        Ok(data)
    }

    pub fn validate_data_only(&self) -> Result<&DataSource> {
        self.check_common()?;
        self.data
            .as_ref()
            .ok_or_else(|| BenchError::Config("config has no data source".into()))
    }

    pub fn validate_theory(&self) -> Result<()> {
        self.check_common()?;
        let t = &self.theory;
        if t.settings.is_empty() || t.n.is_empty() || t.trials == 0 {
            return Err(BenchError::Config(
                "theory needs at least one setting, one n and a positive trial count".into(),
            ));
        }
        Ok(())
    }
}

/// Parses `0,3,5-9` style seed lists; ranges are inclusive.
pub fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    let bad = || BenchError::Config(format!("bad seed list {text:?}"));
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad())?),
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seed_list("0,3,5-7").unwrap(), vec![0, 3, 5, 6, 7]);
        assert!(parse_seed_list("").is_err());
        assert!(parse_seed_list("4-2").is_err());
        assert!(parse_seed_list("x").is_err());
    }

    #[test]
    fn minimal_config_parses() {
        let text = r#"{
            "data": {"kind": "linear_gaussian", "d": 5, "k": 2, "sigma_x": 1, "sigma_c": 0.5,
                     "sigma_y": 0.5, "n_train": 50, "n_val": 20, "n_test": 20},
            "roster": [{"name": "ind", "train": {"regime": {"kind": "independent"},
                        "optimizer": {"kind": "adam", "learning_rate": 0.01}, "epochs": 2, "batch_size": 8}}],
            "seeds": [0]
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert!(cfg.validate_training().is_ok());
        assert_eq!(cfg.data_efficiency.fractions, vec![0.1, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn rejects_empty_roster_and_seeds() {
        let mut cfg = ExperimentConfig::from_json(r#"{"seeds": []}"#).unwrap();
        assert!(cfg.validate_training().is_err());
        cfg.seeds = vec![1];
        assert!(matches!(cfg.validate_training(), Err(BenchError::Config(_))));
        assert!(ExperimentConfig::from_json(r#"{"seeds": [1], "bogus": 2}"#).is_err());
    }
}
