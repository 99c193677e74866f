//! Run artifacts: `rounds.csv`, `clients.csv`, `summary.json` and
//! `config_echo.json`. Every file is written to a temporary sibling and
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use apbfl::MetricsLog;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const CLIENTS_CSV: &str = "clients.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CONFIG_ECHO_JSON: &str = "config_echo.json";

/// Column order of `rounds.csv`. `mean_epsilon` is left out for runs
/// without a privacy budget.
pub const ROUND_COLUMNS: [&str; 8] = [
    "round",
    "global_accuracy",
    "global_loss",
    "mean_val_accuracy",
    "mean_epsilon",
    "threshold",
    "ema_sensitivity",
    "participating_clients",
];

pub const CLIENT_COLUMNS: [&str; 7] = [
    "round",
    "client_id",
    "epsilon_used",
    "prenoise_l2",
    "n_samples",
    "participated",
    "fail_reason",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub status: RunStatus,
    pub label: String,
    pub algorithm: String,
    pub rounds_planned: usize,
    pub last_good_round: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sum_mean_epsilon: Option<f64>,
    /// Initial budget times planned rounds; the upper bound for
    /// `sum_mean_epsilon`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_budget_product: Option<f64>,
    pub dropped_timeout: usize,
    pub dropped_failure: usize,
    pub epsilon_floor_clamps: usize,
    /// Quantity and label skew are drawn independently of each other.
    pub partition_sampling: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Summary {
    pub fn new(cfg: &ExperimentConfig, log: &MetricsLog, error: Option<String>) -> Self {
        let private = cfg.dp.algo.is_private();
        Self {
            status: if error.is_some() { RunStatus::Aborted } else { RunStatus::Completed },
            label: cfg.label(),
            algorithm: cfg.dp.algo.as_str().to_string(),
            rounds_planned: cfg.no_rounds,
            last_good_round: log.rounds.last().map_or(0, |r| r.round),
            final_accuracy: log.final_accuracy(),
            best_accuracy: log.best_accuracy(),
            sum_mean_epsilon: if private { Some(log.sum_mean_epsilon().unwrap_or(0.0)) } else { None },
            epsilon_budget_product: if private {
                cfg.dp.epsilon.map(|e| e * cfg.no_rounds as f64)
            } else {
                None
            },
            dropped_timeout: log.dropped_timeout,
            dropped_failure: log.dropped_failure,
            epsilon_floor_clamps: log.floor_clamps,
            partition_sampling: "independent".to_string(),
            error,
        }
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn rounds_csv(log: &MetricsLog, with_epsilon: bool) -> Vec<u8> {
    let header: Vec<&str> = ROUND_COLUMNS
        .iter()
        .copied()
        .filter(|c| with_epsilon || *c != "mean_epsilon")
        .collect();
    let rows = log.rounds.iter().map(|r| {
        let mut row = vec![
            r.round.to_string(),
            r.global_accuracy.to_string(),
            r.global_loss.to_string(),
            opt(r.mean_val_accuracy),
        ];
        if with_epsilon {
            row.push(opt(r.mean_epsilon));
        }
        row.extend([
            r.threshold.to_string(),
            r.ema_sensitivity.to_string(),
            r.participating_clients.to_string(),
        ]);
        row
    });
    csv_bytes(&header, rows)
}

pub fn clients_csv(log: &MetricsLog) -> Vec<u8> {
    let rows = log.clients.iter().map(|c| {
        vec![
            c.round.to_string(),
            c.client_id.to_string(),
            opt(c.epsilon_used),
            c.prenoise_l2.to_string(),
            c.n_samples.to_string(),
            c.participated.to_string(),
            c.fail_reason.as_str().to_string(),
        ]
    });
    csv_bytes(&CLIENT_COLUMNS, rows)
}

pub fn write_run(dir: &Path, cfg: &ExperimentConfig, log: &MetricsLog, summary: &Summary) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(CONFIG_ECHO_JSON), cfg.to_json_pretty().as_bytes())?;
    write_atomic(&dir.join(ROUNDS_CSV), &rounds_csv(log, cfg.dp.algo.is_private()))?;
    write_atomic(&dir.join(CLIENTS_CSV), &clients_csv(log))?;
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    write_atomic(&dir.join(SUMMARY_JSON), json.as_bytes())
}
