//! CSV ingestion.
//!
//! Header: `x0..x{d-1}`, `c0..c{k-1}`, optional `vis0..vis{k-1}` (0/1), `y`.
//! Reals are written with 17 significant digits so that save → load is exact.
//! The manifest (JSON) carries what the CSV cannot: task kind, class count and
//! concept names, kinds and groups.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConceptSchema, ConceptSpec, Dataset, LabeledExample, Split, Task};
use crate::error::{CbmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: Task,
    pub concepts: Vec<ConceptSpec>,
    #[serde(default)]
    pub visibility_aware: bool,
}

impl Manifest {
    pub fn for_dataset(ds: &Dataset) -> Self {
        Self {
            task: ds.task(),
            concepts: ds.schema().concepts.clone(),
            visibility_aware: ds.schema().visibility_aware,
        }
    }

    pub fn schema(&self) -> Result<ConceptSchema> {
        ConceptSchema::new(self.concepts.clone(), self.visibility_aware)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    Ok(serde_json::from_reader(File::open(path)?)?)
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub(crate) fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Column {
    X(usize),
    C(usize),
    Vis(usize),
    Y,
}

fn parse_header(name: &str) -> Option<Column> {
    let indexed = |prefix: &str| -> Option<usize> {
        name.strip_prefix(prefix)
            .filter(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|rest| rest.parse().ok())
    };
    if name == "y" {
        Some(Column::Y)
    } else if let Some(i) = indexed("vis") {
        Some(Column::Vis(i))
    } else if let Some(i) = indexed("x") {
        Some(Column::X(i))
    } else {
        indexed("c").map(Column::C)
    }
}

pub fn load_csv(path: &Path, manifest: &Manifest, split: Split) -> Result<Dataset> {
    let schema = manifest.schema()?;
    let k = schema.k();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(File::open(path)?);
    let headers = reader
        .headers()
        .map_err(|e| CbmError::SchemaMismatch(format!("unreadable header: {e}")))?
        .clone();

    let mut columns = Vec::with_capacity(headers.len());
    for h in headers.iter() {
        let col = parse_header(h.trim())
            .ok_or_else(|| CbmError::SchemaMismatch(format!("unrecognized column {h:?}")))?;
        if columns.contains(&col) {
            return Err(CbmError::SchemaMismatch(format!("duplicate column {h:?}")));
        }
        columns.push(col);
    }
    let count = |f: fn(&Column) -> bool| columns.iter().filter(|c| f(c)).count();
    let d = count(|c| matches!(c, Column::X(_)));
    let n_c = count(|c| matches!(c, Column::C(_)));
    let n_vis = count(|c| matches!(c, Column::Vis(_)));
    let max_index = |f: fn(&Column) -> Option<usize>| columns.iter().filter_map(f).max();
    if max_index(|c| if let Column::X(i) = c { Some(*i) } else { None }).map_or(0, |m| m + 1) != d {
        return Err(CbmError::SchemaMismatch("x columns must be x0..x{d-1}".into()));
    }
    if n_c != k || max_index(|c| if let Column::C(i) = c { Some(*i) } else { None }).map_or(0, |m| m + 1) != k {
        return Err(CbmError::SchemaMismatch(format!(
            "manifest declares {k} concepts but CSV has {n_c} concept columns"
        )));
    }
    if n_vis != 0
        && (n_vis != k
            || max_index(|c| if let Column::Vis(i) = c { Some(*i) } else { None }).map_or(0, |m| m + 1) != k)
    {
        return Err(CbmError::SchemaMismatch(format!(
            "visibility columns must be absent or vis0..vis{}",
            k - 1
        )));
    }
    if !columns.contains(&Column::Y) {
        return Err(CbmError::SchemaMismatch("missing y column".into()));
    }

    let mut examples = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 1;
        let record = record.map_err(|e| CbmError::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        if record.len() != columns.len() {
            return Err(CbmError::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, got {}", columns.len(), record.len()),
            });
        }
        let mut e = LabeledExample {
            x: vec![0.0; d],
            c: vec![0.0; k],
            visibility: vec![true; k],
            y: 0.0,
        };
        for ((field, col), name) in record.iter().zip(&columns).zip(headers.iter()) {
            let value: f64 = field.trim().parse().map_err(|_| CbmError::Parse {
                row,
                column: name.to_string(),
                message: format!("not a number: {field:?}"),
            })?;
            match *col {
                Column::X(i) => e.x[i] = value,
                Column::C(i) => e.c[i] = value,
                Column::Vis(i) => {
                    e.visibility[i] = match value {
                        1.0 => true,
                        0.0 => false,
                        _ => {
                            return Err(CbmError::Parse {
                                row,
                                column: name.to_string(),
                                message: "visibility must be 0 or 1".into(),
                            })
                        }
                    }
                }
                Column::Y => e.y = value,
            }
        }
        examples.push(e);
    }
    Dataset::new(schema, manifest.task, split, examples)
}

/// Writes `ds` as CSV. Visibility columns are included when the schema is
/// visibility-aware.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    let (d, k) = (ds.d(), ds.k());
    let with_vis = ds.schema().visibility_aware;
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.extend((0..k).map(|j| format!("c{j}")));
    if with_vis {
        header.extend((0..k).map(|j| format!("vis{j}")));
    }
    header.push("y".into());
    writer.write_record(&header).map_err(std::io::Error::from)?;
    for e in ds.examples() {
        let mut rec: Vec<String> = e.x.iter().chain(&e.c).map(|&v| format_real(v)).collect();
        if with_vis {
            rec.extend(e.visibility.iter().map(|&v| if v { "1" } else { "0" }.to_string()));
        }
        rec.push(format_real(e.y));
        writer.write_record(&rec).map_err(std::io::Error::from)?;
    }
    writer.flush()?;
    Ok(())
}
