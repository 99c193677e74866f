//! Parameter sweeps: one run per cell, each in its own subdirectory.
//!
//! A sweep file is either a JSON array of override objects, or an object
//! with optional `cells` (same array form) and `grid` (dotted key to list of
//! values, expanded as a Cartesian product). Override keys are dotted paths
//! into the base config, e.g. `"dp.epsilon"`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use apbfl::exec::{map_ordered, ExecMode};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::experiment::run_experiment_with;
use crate::output::{write_atomic, RunStatus};

pub const SWEEP_INDEX_JSON: &str = "sweep_index.json";

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("cannot read sweep file {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sweep file: {0}")]
    Parse(String),
    #[error("cannot write sweep index in {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Overrides = Map<String, Value>;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepObject {
    #[serde(default)]
    cells: Vec<Overrides>,
    #[serde(default)]
    grid: BTreeMap<String, Vec<Value>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SweepFile {
    List(Vec<Overrides>),
    Object(SweepObject),
}

/// Explicit cells first, then the grid product with the last key varying
/// fastest.
pub fn parse_sweep(text: &str) -> Result<Vec<Overrides>, SweepError> {
    let parsed: SweepFile = serde_json::from_str(text)
        .map_err(|e| SweepError::Parse(format!("expected a list of overrides or {{cells, grid}}: {e}")))?;
    let obj = match parsed {
        SweepFile::List(cells) => SweepObject {
            cells,
            grid: BTreeMap::new(),
        },
        SweepFile::Object(o) => o,
    };
    let mut out = obj.cells;
    if !obj.grid.is_empty() {
        let mut product = vec![Overrides::new()];
        for (key, values) in &obj.grid {
            let mut next = Vec::with_capacity(product.len() * values.len());
            for partial in &product {
                for v in values {
                    let mut cell = partial.clone();
                    cell.insert(key.clone(), v.clone());
                    next.push(cell);
                }
            }
            product = next;
        }
        out.extend(product);
    }
    Ok(out)
}

fn set_dotted(root: &mut Value, path: &str, value: Value) -> Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| format!("override {path}: {} is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one part")
}

pub fn apply_overrides(base: &ExperimentConfig, overrides: &Overrides, output_dir: &Path) -> Result<ExperimentConfig, String> {
    let mut v = serde_json::to_value(base).expect("config serializes");
    for (k, val) in overrides {
        set_dotted(&mut v, k, val.clone())?;
    }
    set_dotted(&mut v, "output_dir", Value::String(output_dir.to_string_lossy().into_owned()))?;
    ExperimentConfig::from_value(v).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Completed,
    Aborted,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    pub index: usize,
    pub directory: String,
    pub overrides: Overrides,
    pub status: CellStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepIndex {
    pub cells: Vec<CellEntry>,
}

impl SweepIndex {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.status != CellStatus::Completed).count()
    }
}

pub fn cell_dir_name(index: usize) -> String {
    format!("cell_{index:03}")
}

/// Runs every cell (concurrently under the `parallel` feature) and writes
/// `sweep_index.json` into `root`. Failing cells are recorded; the others
/// still run.
pub fn run_sweep(base: &ExperimentConfig, cells: &[Overrides], root: &Path, mode: ExecMode) -> Result<SweepIndex, SweepError> {
    fs::create_dir_all(root).map_err(|source| SweepError::Write {
        path: root.to_path_buf(),
        source,
    })?;
    let indexed: Vec<(usize, &Overrides)> = cells.iter().enumerate().collect();
    let entries = map_ordered(mode, &indexed, |&(i, ov)| {
        let name = cell_dir_name(i);
        let mut entry = CellEntry {
            index: i,
            directory: name.clone(),
            overrides: ov.clone(),
            status: CellStatus::Failed,
            label: None,
            error: None,
        };
        match apply_overrides(base, ov, &root.join(&name)) {
            Err(e) => entry.error = Some(e),
            Ok(cfg) => {
                entry.label = Some(cfg.label());
                match run_experiment_with(&cfg, mode) {
                    Ok(report) => {
                        entry.status = match report.summary.status {
                            RunStatus::Completed => CellStatus::Completed,
                            RunStatus::Aborted => CellStatus::Aborted,
                        };
                        entry.error = report.summary.error.clone();
                    }
                    Err(e) => entry.error = Some(e.to_string()),
                }
            }
        }
        entry
    });
    let index = SweepIndex { cells: entries };
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    let path = root.join(SWEEP_INDEX_JSON);
    write_atomic(&path, json.as_bytes()).map_err(|source| SweepError::Write { path, source })?;
    Ok(index)
}

pub fn read_sweep_file(path: &Path) -> Result<Vec<Overrides>, SweepError> {
    let text = fs::read_to_string(path).map_err(|source| SweepError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_sweep(&text)
}
