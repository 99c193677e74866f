use std::path::{Path, PathBuf};

use apbfl::data::{generate_blobs, load_cifar10_binary, DataError, Dataset};
use apbfl::rng::{stream_seed, Stream};
use apbfl::sim::SimError;
use apbfl::{run_training_with, ExecMode, Federation, MetricsLog, Model};
use thiserror::Error;

use crate::config::{ConfigError, DatasetKind, ExperimentConfig};
use crate::output::{write_run, RunStatus, Summary};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("setup: {0}")]
    Setup(#[from] SimError),
    #[error("cannot write outputs to {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    /// Exit code: 1 for configuration problems, 2 for anything that broke
    /// at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::Data(DataError::Infeasible { .. } | DataError::InvalidParameters(_)) => 1,
            RunError::Setup(SimError::Config(_)) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub summary: Summary,
    pub log: MetricsLog,
    pub final_model: Model,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        match self.summary.status {
            RunStatus::Completed => 0,
            RunStatus::Aborted => 2,
        }
    }
}

/// Train and test splits for the configured dataset.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), RunError> {
    match cfg.dataset {
        DatasetKind::Blobs => {
            let b = &cfg.blobs;
            let train = generate_blobs(
                b.num_classes,
                b.input_dim,
                b.train_samples,
                b.spread,
                stream_seed(cfg.seed, Stream::BlobsTrain),
            )?;
            let test = generate_blobs(
                b.num_classes,
                b.input_dim,
                b.test_samples,
                b.spread,
                stream_seed(cfg.seed, Stream::BlobsTest),
            )?;
            Ok((train, test))
        }
        DatasetKind::Cifar10 => {
            let dir = cfg.dataset_path.as_deref().expect("validated");
            let train_files: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .filter(|p| p.exists())
                .collect();
            if train_files.is_empty() {
                return Err(ConfigError::Invalid {
                    key: "dataset_path".into(),
                    constraint: format!("no data_batch_*.bin files in {}", dir.display()),
                }
                .into());
            }
            let train = load_cifar10_binary(&train_files)?;
            let test = load_cifar10_binary(&[dir.join("test_batch.bin")])?;
            cfg.check_capacity(train.len())?;
            Ok((train, test))
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, RunError> {
    run_experiment_with(cfg, ExecMode::default())
}

/// Runs one experiment and writes its artifacts into `cfg.output_dir`. A
/// run that aborts mid-way still writes every completed round and reports
/// status `aborted`.
pub fn run_experiment_with(cfg: &ExperimentConfig, mode: ExecMode) -> Result<RunReport, RunError> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|source| RunError::Output {
        path: out.clone(),
        source,
    })?;
    let (train, test) = load_datasets(cfg)?;
    let fl = cfg.fl_config();
    let fed = Federation::build(
        &train,
        test,
        cfg.total_clients,
        &cfg.partition_params(),
        &fl.devices,
        cfg.seed,
    )?;
    let outcome = run_training_with(&fl, &fed, mode)?;
    let summary = Summary::new(cfg, &outcome.log, outcome.error.as_ref().map(|e| e.to_string()));
    write_run(&out, cfg, &outcome.log, &summary).map_err(|source| RunError::Output {
        path: out.clone(),
        source,
    })?;
    Ok(RunReport {
        output_dir: out,
        summary,
        log: outcome.log,
        final_model: outcome.final_model,
    })
}

/// Applies CLI overrides on top of a parsed config.
pub fn with_overrides(mut cfg: ExperimentConfig, seed: Option<u64>, output_dir: Option<&Path>) -> ExperimentConfig {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d.to_path_buf();
    }
    cfg
}
