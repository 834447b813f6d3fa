//! Summary statistics and result files.
//!
//! A result file is one header line holding the wall-clock timestamp,
//! followed by the pretty-printed JSON payload. Everything after the header
//! is a pure function of the resolved config.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use cbm_core::numerics::{mean, sample_sd};

use crate::Result;

/// Mean and sample SD over seeds, with the `mean ± 2·SD` band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
    pub values: Vec<f64>,
}

impl Stat {
    /// `None` when there are no values.
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let (m, sd) = (mean(values), sample_sd(values));
        Some(Stat {
            mean: m,
            sd,
            lo: m - 2.0 * sd,
            hi: m + 2.0 * sd,
            values: values.to_vec(),
        })
    }
}

/// Writes `<dir>/<name>.json` and returns its path.
pub fn write_result<T: Serialize>(dir: &Path, name: &str, payload: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut text = format!("{{\"timestamp_unix\":{stamp}}}\n");
    text.push_str(&serde_json::to_string_pretty(payload)?);
    text.push('\n');
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, text)?;
    Ok(path)
}

/// The payload of a result file, header removed.
pub fn read_payload(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.split_once('\n').map_or(String::new(), |(_, rest)| rest.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_has_zero_sd() {
        let s = Stat::of(&[0.25]).unwrap();
        assert_eq!((s.mean, s.sd, s.lo, s.hi), (0.25, 0.0, 0.25, 0.25));
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn band_is_two_sd() {
        let s = Stat::of(&[1.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.sd - 2f64.sqrt()).abs() < 1e-15);
        assert!((s.hi - s.mean - 2.0 * s.sd).abs() < 1e-15);
    }

    #[test]
    fn header_is_stripped() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_result(dir.path(), "x", &serde_json::json!({"a": 1})).unwrap();
        let payload = read_payload(&p).unwrap();
        assert_eq!(payload, "{\n  \"a\": 1\n}\n");
        let raw = std::fs::read_to_string(&p).unwrap();
        assert!(raw.starts_with("{\"timestamp_unix\":"));
    }
}
