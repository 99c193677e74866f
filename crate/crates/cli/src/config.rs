//! Experiment configuration as read from JSON.
//!
//! Key names follow the simulator's published parameter tables. Unknown keys
//! are rejected so that typos fail loudly.

use std::fs;
use std::path::{Path, PathBuf};

use apbfl::data::{PartitionParams, Skew};
use apbfl::noise::GaussianForm;
use apbfl::{Aggregation, Algorithm, DeviceSettings, FlConfig, PrivacySettings, WindowMode};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] serde_json::Error),
    #[error("{key}: {constraint}")]
    Invalid { key: String, constraint: String },
}

fn invalid(key: &str, constraint: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        constraint: constraint.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClientSelection {
    #[default]
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Blobs,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobsConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub spread: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            input_dim: 8,
            train_samples: 4000,
            test_samples: 1000,
            spread: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    pub algo: Algorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default = "defaults::sensitivity")]
    pub fixed_sensitivity: f64,
    #[serde(default)]
    pub gaussian_form: GaussianForm,
    #[serde(default = "defaults::lr_sensitivity")]
    pub lr_sensitivity: f64,
    #[serde(default = "defaults::lr_threshold")]
    pub lr_threshold: f64,
    #[serde(default = "defaults::initial_threshold")]
    pub initial_threshold: f64,
    #[serde(default)]
    pub window_mode: WindowMode,
}

mod defaults {
    use std::path::PathBuf;

    pub fn sensitivity() -> f64 {
        1.0
    }
    pub fn lr_sensitivity() -> f64 {
        1e-4
    }
    pub fn lr_threshold() -> f64 {
        0.5
    }
    pub fn initial_threshold() -> f64 {
        5.0
    }
    pub fn epochs() -> usize {
        2
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn timeout() -> f64 {
        200.0
    }
    pub fn alpha() -> f64 {
        0.5
    }
    pub fn min_quantity() -> usize {
        32
    }
    pub fn max_quantity() -> usize {
        2000
    }
    pub fn bandwidth_mean() -> f64 {
        20.0
    }
    pub fn bandwidth_std() -> f64 {
        10.0
    }
    pub fn perf_mean() -> f64 {
        1.0
    }
    pub fn perf_std() -> f64 {
        0.2
    }
    pub fn reliability() -> f64 {
        1.0
    }
    pub fn yes() -> bool {
        true
    }
    pub fn prox_mu() -> f64 {
        0.01
    }
    pub fn learning_rate() -> f64 {
        0.1
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("output")
    }
}

/// Full experiment description. Required keys: `no_rounds`,
/// `total_clients`, `selected_clients`, `dataset`, `dp.algo`, `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub no_rounds: usize,
    pub total_clients: usize,
    pub selected_clients: usize,
    #[serde(default)]
    pub algorithm_cs: ClientSelection,
    pub dataset: DatasetKind,
    /// Directory holding `data_batch_*.bin` and `test_batch.bin`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
    #[serde(default)]
    pub blobs: BlobsConfig,
    #[serde(default = "defaults::epochs")]
    pub no_epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Seconds.
    #[serde(default = "defaults::timeout", alias = "timeout_s")]
    pub timeout: f64,
    #[serde(default)]
    pub data_quantity_skew: Skew,
    #[serde(default)]
    pub data_label_skew: Skew,
    #[serde(default = "defaults::alpha")]
    pub data_label_distribution_parameter: f64,
    #[serde(default = "defaults::alpha")]
    pub data_quantity_distribution_parameter: f64,
    #[serde(default = "defaults::min_quantity")]
    pub data_quantity_min_parameter: usize,
    #[serde(default = "defaults::max_quantity")]
    pub data_quantity_max_parameter: usize,
    #[serde(default = "defaults::bandwidth_mean")]
    pub network_bandwidth_mean: f64,
    #[serde(default = "defaults::bandwidth_std")]
    pub network_bandwidth_std: f64,
    #[serde(default)]
    pub network_bandwidth_min: f64,
    #[serde(default = "defaults::perf_mean")]
    pub performance_factor_mean: f64,
    #[serde(default = "defaults::perf_std")]
    pub performance_factor_std: f64,
    #[serde(default = "defaults::reliability")]
    pub reliability_parameter: f64,
    #[serde(default = "defaults::yes")]
    pub create_synthetic_client_failures: bool,
    pub dp: DpConfig,
    #[serde(default, alias = "aggregation")]
    pub aggregation_strategy: Aggregation,
    #[serde(default = "defaults::prox_mu")]
    pub prox_mu: f64,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub model: ModelConfig,
    pub seed: u64,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Range and cross-field checks. Core-level checks run as well so every
    /// problem surfaces before any training.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.selected_clients > self.total_clients {
            return Err(invalid(
                "selected_clients",
                format!(
                    "selected_clients ≤ total_clients required ({} > {})",
                    self.selected_clients, self.total_clients
                ),
            ));
        }
        let private = self.dp.algo.is_private();
        match (private, self.dp.epsilon) {
            (true, None) => return Err(invalid("dp.epsilon", format!("required for {}", self.dp.algo.as_str()))),
            (_, Some(e)) if !(e > 0.0 && e.is_finite()) => {
                return Err(invalid("dp.epsilon", "must be a positive finite number"))
            }
            _ => {}
        }
        if self.dp.algo.is_gaussian() && self.dp.delta.is_none() {
            return Err(invalid(
                "dp.delta",
                format!("δ is required for {}", self.dp.algo.as_str()),
            ));
        }
        if !self.dp.algo.is_gaussian() && self.dp.delta.is_some() {
            return Err(invalid(
                "dp.delta",
                format!("δ only applies to apb_gauss and apb_gaclip, not {}", self.dp.algo.as_str()),
            ));
        }
        if self.data_quantity_min_parameter == 0 || self.data_quantity_min_parameter > self.data_quantity_max_parameter {
            return Err(invalid(
                "data_quantity_min_parameter",
                "0 < data_quantity_min_parameter ≤ data_quantity_max_parameter required",
            ));
        }
        for (key, v) in [
            ("data_label_distribution_parameter", self.data_label_distribution_parameter),
            ("data_quantity_distribution_parameter", self.data_quantity_distribution_parameter),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(key, "must be positive"));
            }
        }
        match self.dataset {
            DatasetKind::Cifar10 if self.dataset_path.is_none() => {
                return Err(invalid("dataset_path", "required when dataset is cifar10"));
            }
            DatasetKind::Blobs => {
                let b = &self.blobs;
                if b.num_classes < 2 || b.input_dim == 0 || b.test_samples == 0 || !(b.spread >= 0.0) {
                    return Err(invalid(
                        "blobs",
                        "num_classes ≥ 2, input_dim ≥ 1, test_samples ≥ 1 and spread ≥ 0 required",
                    ));
                }
                self.check_capacity(b.train_samples)?;
            }
            _ => {}
        }
        self.fl_config()
            .validate()
            .map_err(|e| invalid("config", e.to_string()))
    }

    /// `total_clients · data_quantity_min_parameter ≤ dataset size`.
    pub fn check_capacity(&self, train_samples: usize) -> Result<(), ConfigError> {
        if self.total_clients * self.data_quantity_min_parameter > train_samples {
            return Err(invalid(
                "data_quantity_min_parameter",
                format!(
                    "total_clients · data_quantity_min_parameter ≤ dataset size required ({} · {} > {})",
                    self.total_clients, self.data_quantity_min_parameter, train_samples
                ),
            ));
        }
        Ok(())
    }

    pub fn partition_params(&self) -> PartitionParams {
        PartitionParams {
            label_skew: self.data_label_skew,
            quantity_skew: self.data_quantity_skew,
            alpha_label: self.data_label_distribution_parameter,
            alpha_quantity: self.data_quantity_distribution_parameter,
            min_quantity: self.data_quantity_min_parameter,
            max_quantity: self.data_quantity_max_parameter,
        }
    }

    pub fn fl_config(&self) -> FlConfig {
        FlConfig {
            rounds: self.no_rounds,
            total_clients: self.total_clients,
            selected_clients: self.selected_clients,
            learning_rate: self.learning_rate,
            epochs: self.no_epochs,
            batch_size: self.batch_size,
            aggregation: self.aggregation_strategy,
            prox_mu: self.prox_mu,
            privacy: PrivacySettings {
                algorithm: self.dp.algo,
                epsilon: self.dp.epsilon.unwrap_or(1.0),
                delta: self.dp.delta,
                sensitivity: self.dp.fixed_sensitivity,
                gaussian_form: self.dp.gaussian_form,
                lr_sensitivity: self.dp.lr_sensitivity,
                lr_threshold: self.dp.lr_threshold,
                initial_threshold: self.dp.initial_threshold,
                window_mode: self.dp.window_mode,
            },
            devices: DeviceSettings {
                failures_enabled: self.create_synthetic_client_failures,
                timeout_s: self.timeout,
                bandwidth_mean: self.network_bandwidth_mean,
                bandwidth_std: self.network_bandwidth_std,
                bandwidth_min: self.network_bandwidth_min,
                performance_factor_mean: self.performance_factor_mean,
                performance_factor_std: self.performance_factor_std,
                reliability: self.reliability_parameter,
            },
            hidden_layers: self.model.hidden_layers.clone(),
            seed: self.seed,
        }
    }

    /// Short legend label, e.g. `apb_lap eps=50 N=10`.
    pub fn label(&self) -> String {
        match self.dp.epsilon {
            Some(e) if self.dp.algo.is_private() => {
                format!("{} eps={} N={}", self.dp.algo.as_str(), e, self.selected_clients)
            }
            _ => format!("{} N={}", self.dp.algo.as_str(), self.selected_clients),
        }
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::from_json_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "no_rounds": 1, "total_clients": 2, "selected_clients": 1,
        "dataset": "blobs", "dp": {"algo": "no_dp"}, "seed": 1
    }"#;

    fn with(patch: &str) -> Result<ExperimentConfig, ConfigError> {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        let p: serde_json::Value = serde_json::from_str(patch).unwrap();
        for (k, val) in p.as_object().unwrap() {
            v[k] = val.clone();
        }
        ExperimentConfig::from_value(v)
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_json_str(MINIMAL).unwrap();
        assert_eq!(c.no_epochs, 2);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.timeout, 200.0);
        assert_eq!(c.data_quantity_min_parameter, 32);
        assert_eq!(c.data_quantity_max_parameter, 2000);
        assert_eq!(c.dp.initial_threshold, 5.0);
        assert_eq!(c.dp.lr_sensitivity, 1e-4);
        assert_eq!(c.aggregation_strategy, Aggregation::FedProx);
        assert!(c.create_synthetic_client_failures);
    }

    #[test]
    fn short_key_aliases_parse() {
        let c = with(r#"{"timeout_s": 12.5, "aggregation": "fedavg"}"#).unwrap();
        assert_eq!(c.timeout, 12.5);
        assert_eq!(c.aggregation_strategy, Aggregation::FedAvg);
    }

    #[test]
    fn selected_above_total_is_named() {
        let err = with(r#"{"selected_clients": 20, "total_clients": 10}"#).unwrap_err();
        assert!(err.to_string().contains("selected_clients ≤ total_clients"), "{err}");
    }

    #[test]
    fn gaussian_needs_delta() {
        let err = with(r#"{"dp": {"algo": "apb_gauss", "epsilon": 100}}"#).unwrap_err();
        assert!(err.to_string().contains("δ is required"), "{err}");
        assert!(with(r#"{"dp": {"algo": "apb_gauss", "epsilon": 100, "delta": 0.01}}"#).is_ok());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = with(r#"{"no_round": 3}"#).unwrap_err();
        assert!(err.to_string().contains("no_round"), "{err}");
        let err = with(r#"{"dp": {"algo": "no_dp", "epsilno": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("epsilno"), "{err}");
    }

    #[test]
    fn missing_required_key_is_named() {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        v.as_object_mut().unwrap().remove("seed");
        let err = ExperimentConfig::from_value(v).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn capacity_and_cifar_path_checked() {
        let err = with(r#"{"total_clients": 200}"#).unwrap_err();
        assert!(err.to_string().contains("dataset size"), "{err}");
        let err = with(r#"{"dataset": "cifar10"}"#).unwrap_err();
        assert!(err.to_string().contains("dataset_path"), "{err}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn echo_round_trips_for_any_valid_config(
            total in 1usize..60,
            sel_frac in 0.0..1.0f64,
            algo in 0usize..4,
            eps in 0.01..1e4f64,
            delta in 1e-6..0.5f64,
            sens in 0.01..10.0f64,
            lr in 0.0..1.0f64,
            seed in proptest::prelude::any::<u64>(),
            hidden in proptest::collection::vec(1usize..80, 0..3),
            dirichlet in proptest::prelude::any::<bool>(),
        ) {
            let algo = ["no_dp", "apb_lap", "apb_gauss", "apb_gaclip"][algo];
            let mut dp = serde_json::json!({"algo": algo});
            if algo != "no_dp" {
                dp["epsilon"] = eps.into();
                dp["fixed_sensitivity"] = sens.into();
            }
            if algo == "apb_gauss" || algo == "apb_gaclip" {
                dp["delta"] = delta.into();
            }
            let v = serde_json::json!({
                "no_rounds": 3,
                "total_clients": total,
                "selected_clients": 1 + ((total - 1) as f64 * sel_frac) as usize,
                "dataset": "blobs",
                "data_label_skew": if dirichlet { "dirichlet" } else { "uniform" },
                "dp": dp,
                "learning_rate": lr,
                "model": {"hidden_layers": hidden},
                "seed": seed,
            });
            let c = ExperimentConfig::from_value(v).unwrap();
            let back = ExperimentConfig::from_json_str(&c.to_json_pretty()).unwrap();
            proptest::prop_assert_eq!(back, c);
        }
    }

    #[test]
    fn echo_round_trips() {
        let c = with(r#"{"dp": {"algo": "apb_gaclip", "epsilon": 150, "delta": 0.01}, "model": {"hidden_layers": [64]}}"#)
            .unwrap();
        let back = ExperimentConfig::from_json_str(&c.to_json_pretty()).unwrap();
        assert_eq!(back, c);
    }
}
