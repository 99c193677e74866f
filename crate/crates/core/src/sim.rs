//! The training loop: federation setup and the round barrier.
//!
//! Per round: select clients, drop unavailable ones, run every participating
//! client against one immutable snapshot (concurrently when allowed), then
//! aggregate, apply, update the clipping threshold and budgets, and evaluate.
//! The whole [`MetricsLog`] is a pure function of the configuration and seed.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{BudgetError, BudgetState, HistoryWindow};
use crate::data::{partition, split_train_val, DataError, Dataset, PartitionParams};
use crate::exec::{map_ordered, ExecMode};
use crate::model::{evaluate, init_model, Model, ModelError, ModelSpec, TrainConfig};
use crate::noise::NoiseError;
use crate::rng::{self, mix64, Stream};
use crate::rounds::{
    aggregate, apply_aggregate, client_round, select_clients, simulate_availability, update_threshold,
    Aggregation, Algorithm, ClientError, ClientOutcome, ClientProfile, FailReason, PrivacySettings,
    RoundContext, RoundError,
};

/// Fraction of every client's samples held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Round(#[from] RoundError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("round {round}: global model became non-finite")]
    NonFiniteModel { round: usize },
}

/// Device simulation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSettings {
    pub failures_enabled: bool,
    pub timeout_s: f64,
    pub bandwidth_mean: f64,
    pub bandwidth_std: f64,
    pub bandwidth_min: f64,
    pub performance_factor_mean: f64,
    pub performance_factor_std: f64,
    pub reliability: f64,
}

impl Default for DeviceSettings {
    fn default() -> Self {
        Self {
            failures_enabled: true,
            timeout_s: 200.0,
            bandwidth_mean: 20.0,
            bandwidth_std: 10.0,
            bandwidth_min: 0.0,
            performance_factor_mean: 1.0,
            performance_factor_std: 0.2,
            reliability: 1.0,
        }
    }
}

pub const MIN_PERFORMANCE_FACTOR: f64 = 0.1;

/// Everything the training loop needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlConfig {
    pub rounds: usize,
    pub total_clients: usize,
    pub selected_clients: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub aggregation: Aggregation,
    pub prox_mu: f64,
    pub privacy: PrivacySettings,
    pub devices: DeviceSettings,
    pub hidden_layers: Vec<usize>,
    pub seed: u64,
}

fn unit_interval(x: f64) -> bool {
    x > 0.0 && x <= 1.0
}

impl FlConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.rounds == 0 {
            return bad("no_rounds must be at least 1".into());
        }
        if self.total_clients == 0 || self.selected_clients == 0 {
            return bad("total_clients and selected_clients must be at least 1".into());
        }
        if self.selected_clients > self.total_clients {
            return bad(format!(
                "selected_clients ≤ total_clients violated ({} > {})",
                self.selected_clients, self.total_clients
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("no_epochs and batch_size must be at least 1".into());
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return bad("prox_mu must be finite and >= 0".into());
        }
        let p = &self.privacy;
        if p.algorithm.is_private() {
            if !(p.epsilon > 0.0 && p.epsilon.is_finite()) {
                return bad("dp.epsilon must be positive".into());
            }
            if !(p.sensitivity > 0.0 && p.sensitivity.is_finite()) {
                return bad("dp.fixed_sensitivity must be positive".into());
            }
        }
        if p.algorithm.is_gaussian() {
            match p.delta {
                None => return bad(format!("dp.delta is required for {}", p.algorithm.as_str())),
                Some(d) if !(d > 0.0 && d < 1.0) => return bad("dp.delta must lie in (0, 1)".into()),
                _ => {}
            }
        }
        if p.algorithm == Algorithm::ApbGaclip {
            if !unit_interval(p.lr_threshold) || !unit_interval(p.lr_sensitivity) {
                return bad("dp.lr_threshold and dp.lr_sensitivity must lie in (0, 1]".into());
            }
            if !(p.initial_threshold > 0.0 && p.initial_threshold.is_finite()) {
                return bad("dp.initial_threshold must be positive".into());
            }
        }
        let d = &self.devices;
        if !(d.timeout_s > 0.0) {
            return bad("timeout must be positive".into());
        }
        if !(0.0..=1.0).contains(&d.reliability) {
            return bad("reliability_parameter must lie in [0, 1]".into());
        }
        if !(d.bandwidth_std >= 0.0 && d.performance_factor_std >= 0.0 && d.bandwidth_min >= 0.0) {
            return bad("bandwidth/performance std and network_bandwidth_min must be >= 0".into());
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            prox_mu: match self.aggregation {
                Aggregation::FedProx => self.prox_mu,
                Aggregation::FedAvg => 0.0,
            },
            seed: 0,
        }
    }
}

/// Clients with their data plus the held-out global test set.
#[derive(Debug, Clone)]
pub struct Federation {
    pub clients: Vec<ClientProfile>,
    pub test: Dataset,
}

impl Federation {
    /// Partitions `train`, splits every client 80/20 into train/validation
    /// and draws device profiles.
    pub fn build(
        train: &Dataset,
        test: Dataset,
        num_clients: usize,
        partition_params: &PartitionParams,
        devices: &DeviceSettings,
        seed: u64,
    ) -> Result<Self, SimError> {
        if test.is_empty() {
            return Err(SimError::Config("global test set is empty".into()));
        }
        let plan = partition(train, num_clients, partition_params, rng::stream_seed(seed, Stream::Partition))?;
        let normal = |mean: f64, std: f64| {
            Normal::new(mean, std).map_err(|e| SimError::Config(format!("device distribution: {e}")))
        };
        let bandwidth = normal(devices.bandwidth_mean, devices.bandwidth_std)?;
        let perf = normal(devices.performance_factor_mean, devices.performance_factor_std)?;
        let mut profile_rng = rng::stream(seed, Stream::Profiles);
        let split_seed = rng::stream_seed(seed, Stream::LocalSplit);
        let clients = plan
            .assignments
            .iter()
            .enumerate()
            .map(|(id, idx)| {
                let (tr, va) = split_train_val(idx, VALIDATION_FRACTION, mix64(split_seed ^ id as u64));
                ClientProfile {
                    id,
                    train: train.subset(&tr),
                    val: train.subset(&va),
                    bandwidth: bandwidth.sample(&mut profile_rng).max(devices.bandwidth_min).max(0.0),
                    performance_factor: perf.sample(&mut profile_rng).max(MIN_PERFORMANCE_FACTOR),
                    reliability: devices.reliability,
                }
            })
            .collect();
        Ok(Self { clients, test })
    }

    pub fn n_total(&self) -> usize {
        self.clients.iter().map(|c| c.train.len()).sum()
    }

    pub fn model_spec(&self, hidden_layers: &[usize]) -> ModelSpec {
        ModelSpec {
            input_dim: self.test.input_dim(),
            hidden_layers: hidden_layers.to_vec(),
            num_classes: self.test.num_classes(),
            activation: Default::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub global_accuracy: f64,
    pub global_loss: f64,
    pub mean_val_accuracy: Option<f64>,
    pub mean_epsilon: Option<f64>,
    /// Clipping threshold the clients saw this round.
    pub threshold: f64,
    /// Sensitivity used for this round's noise.
    pub ema_sensitivity: f64,
    pub participating_clients: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub round: usize,
    pub client_id: usize,
    pub epsilon_used: Option<f64>,
    pub prenoise_l2: f64,
    pub n_samples: usize,
    pub participated: bool,
    pub fail_reason: FailReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rounds: Vec<RoundRecord>,
    /// One record per participating client per round.
    pub clients: Vec<ClientRecord>,
    pub dropped_timeout: usize,
    pub dropped_failure: usize,
    pub floor_clamps: usize,
}

impl MetricsLog {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.global_accuracy)
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.rounds.iter().map(|r| r.global_accuracy).reduce(f64::max)
    }

    /// Σ over rounds of the mean budget used.
    pub fn sum_mean_epsilon(&self) -> Option<f64> {
        let vals: Vec<f64> = self.rounds.iter().filter_map(|r| r.mean_epsilon).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum())
        }
    }
}

/// Result of a run; on abort `error` is set and `log` holds every round up
/// to the last good one.
#[derive(Debug)]
pub struct TrainingOutcome {
    pub log: MetricsLog,
    pub initial_model: Model,
    pub final_model: Model,
    pub error: Option<SimError>,
}

/// Server state carried across the round barrier.
#[derive(Debug, Clone)]
pub struct GlobalState {
    pub model: Model,
    pub round: usize,
    pub history: HistoryWindow,
    pub threshold: f64,
    pub ema_sensitivity: f64,
    pub budgets: Vec<BudgetState>,
}

pub fn run_training(cfg: &FlConfig, fed: &Federation) -> Result<TrainingOutcome, SimError> {
    run_training_with(cfg, fed, ExecMode::default())
}

/// Runs all rounds. Configuration problems are returned as `Err` before
/// round 1; failures during training end the run early and are reported in
/// [`TrainingOutcome::error`].
pub fn run_training_with(cfg: &FlConfig, fed: &Federation, mode: ExecMode) -> Result<TrainingOutcome, SimError> {
    cfg.validate()?;
    if fed.clients.len() != cfg.total_clients {
        return Err(SimError::Config(format!(
            "federation has {} clients but total_clients = {}",
            fed.clients.len(),
            cfg.total_clients
        )));
    }
    let spec = fed.model_spec(&cfg.hidden_layers);
    let initial = init_model(&spec, rng::stream_seed(cfg.seed, Stream::ModelInit))?;
    let epsilon_init = if cfg.privacy.algorithm.is_private() { cfg.privacy.epsilon } else { 1.0 };
    let budgets = (0..cfg.total_clients)
        .map(|id| BudgetState::new(id, epsilon_init))
        .collect::<Result<Vec<_>, _>>()?;
    let mut state = GlobalState {
        model: initial.clone(),
        round: 0,
        history: HistoryWindow::default(),
        threshold: cfg.privacy.initial_threshold,
        ema_sensitivity: cfg.privacy.sensitivity,
        budgets,
    };
    let mut log = MetricsLog::default();
    let train_cfg = cfg.train_config();
    let n_total = fed.n_total();
    let payload_bytes = 8 * spec.param_count();

    for t in 1..=cfg.rounds {
        if let Err(e) = step_round(cfg, fed, &train_cfg, n_total, payload_bytes, t, &mut state, &mut log, mode) {
            return Ok(TrainingOutcome {
                log,
                initial_model: initial,
                final_model: state.model,
                error: Some(e),
            });
        }
    }
    Ok(TrainingOutcome {
        log,
        initial_model: initial,
        final_model: state.model,
        error: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn step_round(
    cfg: &FlConfig,
    fed: &Federation,
    train_cfg: &TrainConfig,
    n_total: usize,
    payload_bytes: usize,
    t: usize,
    state: &mut GlobalState,
    log: &mut MetricsLog,
    mode: ExecMode,
) -> Result<(), SimError> {
    let selected = select_clients(
        cfg.total_clients,
        cfg.selected_clients,
        &mut rng::stream(cfg.seed, Stream::Selection { round: t as u64 }),
    )?;
    let mut participants = Vec::with_capacity(selected.len());
    for &id in &selected {
        let client = &fed.clients[id];
        if cfg.devices.failures_enabled {
            let base_compute_s = 1e-6 * (client.train.len() * cfg.epochs) as f64;
            let mut r = rng::stream(cfg.seed, Stream::Availability { round: t as u64, client: id as u64 });
            let a = simulate_availability(client, payload_bytes, base_compute_s, cfg.devices.timeout_s, &mut r);
            match a.reason {
                FailReason::Ok => participants.push(id),
                FailReason::Timeout => log.dropped_timeout += 1,
                FailReason::Failure => log.dropped_failure += 1,
            }
        } else {
            participants.push(id);
        }
    }

    let ctx = RoundContext {
        master_seed: cfg.seed,
        round: t,
        total_rounds: cfg.rounds,
        total_clients: cfg.total_clients,
        selected: cfg.selected_clients,
        n_total,
        global: &state.model,
        history: &state.history,
        threshold: state.threshold,
        ema_sensitivity: state.ema_sensitivity,
        train: train_cfg,
        privacy: &cfg.privacy,
    };
    let results: Vec<Result<ClientOutcome, ClientError>> = map_ordered(mode, &participants, |&id| {
        client_round(&ctx, &fed.clients[id], &state.budgets[id])
    });
    let mut outcomes = Vec::with_capacity(results.len());
    for (id, r) in participants.iter().zip(results) {
        outcomes.push(r.map_err(|source| RoundError::Client { round: t, client: *id, source })?);
    }

    let threshold_used = state.threshold;
    let sensitivity_used = outcomes.first().map_or(state.ema_sensitivity, |o| o.next_sensitivity);

    if outcomes.is_empty() {
        let (acc, loss) = match state.history.last() {
            Some(last) => last,
            None => evaluate(&state.model, &fed.test)?,
        };
        state.history.push(acc, loss);
        state.round = t;
        log.rounds.push(RoundRecord {
            round: t,
            global_accuracy: acc,
            global_loss: loss,
            mean_val_accuracy: None,
            mean_epsilon: None,
            threshold: threshold_used,
            ema_sensitivity: state.ema_sensitivity,
            participating_clients: 0,
            skipped: true,
        });
        return Ok(());
    }

    let updates: Vec<_> = outcomes.iter().map(|o| o.update.clone()).collect();
    let agg = aggregate(&updates, cfg.aggregation)?;
    let next_model = apply_aggregate(&state.model, &agg).map_err(|e| match e {
        RoundError::Param(_) | RoundError::Model(_) => SimError::NonFiniteModel { round: t },
        other => other.into(),
    })?;

    let (acc, loss) = evaluate(&next_model, &fed.test)?;
    if !(acc.is_finite() && loss.is_finite()) {
        return Err(SimError::NonFiniteModel { round: t });
    }
    let val_scores = map_ordered(mode, &participants, |&id| {
        let val = &fed.clients[id].val;
        if val.is_empty() {
            None
        } else {
            evaluate(&next_model, val).ok().map(|(a, _)| a)
        }
    });
    let val_scores: Vec<f64> = val_scores.into_iter().flatten().collect();
    let mean_val_accuracy = if val_scores.is_empty() {
        None
    } else {
        Some(val_scores.iter().sum::<f64>() / val_scores.len() as f64)
    };

    // Round barrier: single writer from here on.
    let mut eps_sum = 0.0;
    for o in &outcomes {
        if let Some(b) = o.budget {
            state.budgets[b.client_id] = b;
        }
        if o.floored {
            log.floor_clamps += 1;
        }
        if let Some(e) = o.update.epsilon_used {
            eps_sum += e;
        }
        log.clients.push(ClientRecord {
            round: t,
            client_id: o.update.client_id,
            epsilon_used: o.update.epsilon_used,
            prenoise_l2: o.update.prenoise_l2,
            n_samples: o.update.weight,
            participated: true,
            fail_reason: FailReason::Ok,
        });
    }
    let mean_epsilon = cfg
        .privacy
        .algorithm
        .is_private()
        .then(|| eps_sum / outcomes.len() as f64);

    if cfg.privacy.algorithm == Algorithm::ApbGaclip {
        let norms: Vec<f64> = outcomes.iter().map(|o| o.update.prenoise_l2).collect();
        state.threshold = update_threshold(state.threshold, &norms, cfg.privacy.lr_threshold);
        state.ema_sensitivity = sensitivity_used;
    }
    state.model = next_model;
    state.history.push(acc, loss);
    state.round = t;
    log.rounds.push(RoundRecord {
        round: t,
        global_accuracy: acc,
        global_loss: loss,
        mean_val_accuracy,
        mean_epsilon,
        threshold: threshold_used,
        ema_sensitivity: sensitivity_used,
        participating_clients: outcomes.len(),
        skipped: false,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::WindowMode;
    use crate::data::generate_blobs;
    use crate::noise::GaussianForm;

    pub(crate) fn toy_config(algorithm: Algorithm) -> FlConfig {
        FlConfig {
            rounds: 4,
            total_clients: 4,
            selected_clients: 2,
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 16,
            aggregation: Aggregation::FedProx,
            prox_mu: 0.01,
            privacy: PrivacySettings {
                algorithm,
                epsilon: 50.0,
                delta: Some(0.01),
                sensitivity: 1.0,
                gaussian_form: GaussianForm::Standard,
                lr_sensitivity: 1e-4,
                lr_threshold: 0.5,
                initial_threshold: 5.0,
                window_mode: WindowMode::Sum,
            },
            devices: DeviceSettings::default(),
            hidden_layers: vec![],
            seed: 3,
        }
    }

    fn toy_fed(cfg: &FlConfig) -> Federation {
        let train = generate_blobs(3, 4, 400, 0.15, 1).unwrap();
        let test = generate_blobs(3, 4, 90, 0.15, 2).unwrap();
        Federation::build(&train, test, cfg.total_clients, &PartitionParams::default(), &cfg.devices, cfg.seed).unwrap()
    }

    #[test]
    fn validation_catches_cross_field_errors() {
        let mut c = toy_config(Algorithm::ApbGauss);
        c.selected_clients = 5;
        assert!(c.validate().unwrap_err().to_string().contains("selected_clients ≤ total_clients"));
        let mut c = toy_config(Algorithm::ApbGauss);
        c.privacy.delta = None;
        assert!(c.validate().unwrap_err().to_string().contains("delta"));
        let mut c = toy_config(Algorithm::ApbLap);
        c.privacy.delta = None;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn every_algorithm_runs_and_is_parallel_invariant() {
        for algo in [Algorithm::NoDp, Algorithm::ApbLap, Algorithm::ApbGauss, Algorithm::ApbGaclip] {
            let cfg = toy_config(algo);
            let fed = toy_fed(&cfg);
            let a = run_training_with(&cfg, &fed, ExecMode::Sequential).unwrap();
            let b = run_training_with(&cfg, &fed, ExecMode::Parallel).unwrap();
            assert!(a.error.is_none(), "{algo:?}: {:?}", a.error);
            assert_eq!(a.log, b.log);
            assert_eq!(a.final_model, b.final_model);
            assert_eq!(a.log.rounds.len(), 4);
            assert_eq!(a.log.clients.len(), a.log.rounds.iter().map(|r| r.participating_clients).sum::<usize>());
        }
    }

    #[test]
    fn all_failures_skip_rounds_and_freeze_model() {
        let mut cfg = toy_config(Algorithm::ApbLap);
        cfg.devices.reliability = 0.0;
        let fed = toy_fed(&cfg);
        let out = run_training(&cfg, &fed).unwrap();
        assert!(out.error.is_none());
        assert_eq!(out.final_model, out.initial_model);
        assert!(out.log.rounds.iter().all(|r| r.skipped && r.participating_clients == 0));
        assert!(out.log.clients.is_empty());
        assert_eq!(out.log.dropped_failure, 8);
        let acc0 = out.log.rounds[0].global_accuracy;
        assert!(out.log.rounds.iter().all(|r| r.global_accuracy == acc0));
    }

    #[test]
    fn single_round_zero_step_keeps_initial_model() {
        let mut cfg = toy_config(Algorithm::NoDp);
        cfg.rounds = 1;
        cfg.selected_clients = 1;
        cfg.learning_rate = 0.0;
        let fed = toy_fed(&cfg);
        let out = run_training(&cfg, &fed).unwrap();
        assert_eq!(out.final_model, out.initial_model);
    }

    #[test]
    fn budget_collapse_aborts_with_context() {
        let mut cfg = toy_config(Algorithm::ApbLap);
        cfg.privacy.epsilon = 1e-320;
        let fed = toy_fed(&cfg);
        let out = run_training(&cfg, &fed).unwrap();
        let err = out.error.expect("collapse");
        assert!(err.to_string().contains("round 1, client"), "{err}");
        assert!(out.log.rounds.is_empty());
    }
}
