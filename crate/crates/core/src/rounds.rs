//! One federated round: client selection, availability, the per-client
//! privatization pipeline, and server-side aggregation.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{adjustment_coefficient, compute_score, BudgetError, BudgetState, HistoryWindow, WindowMode};
use crate::data::Dataset;
use crate::model::{compute_update, train_local, Model, ModelError, TrainConfig};
use crate::noise::{clip_l2, ema_update, gaussian_sigma, laplace_scale, sample_noise, GaussianForm, Mechanism, NoiseError};
use crate::param::{cosine_similarity, l2_norm, linear_combine, ParamError, ParamVector};
use crate::rng::{self, Stream, StreamRng};

/// Floor applied to the adaptive clipping threshold.
pub const MIN_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RoundError {
    #[error("cannot select {selected} of {total} clients")]
    Selection { selected: usize, total: usize },
    #[error("no updates to aggregate")]
    NoUpdates,
    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: ClientError,
    },
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("client has no training data")]
    NoTrainingData,
    #[error("local training failed: {0}")]
    Training(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    NoDp,
    ApbLap,
    ApbGauss,
    ApbGaclip,
}

impl Algorithm {
    pub fn is_private(self) -> bool {
        self != Algorithm::NoDp
    }

    pub fn is_gaussian(self) -> bool {
        matches!(self, Algorithm::ApbGauss | Algorithm::ApbGaclip)
    }

    pub fn mechanism(self) -> Mechanism {
        match self {
            Algorithm::NoDp => Mechanism::None,
            Algorithm::ApbLap => Mechanism::Laplace,
            Algorithm::ApbGauss | Algorithm::ApbGaclip => Mechanism::Gaussian,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::NoDp => "no_dp",
            Algorithm::ApbLap => "apb_lap",
            Algorithm::ApbGauss => "apb_gauss",
            Algorithm::ApbGaclip => "apb_gaclip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    FedAvg,
    #[default]
    FedProx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailReason {
    Ok,
    Timeout,
    Failure,
}

impl FailReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailReason::Ok => "ok",
            FailReason::Timeout => "timeout",
            FailReason::Failure => "failure",
        }
    }
}

/// A simulated client with its local data and device characteristics.
#[derive(Debug, Clone)]
pub struct ClientProfile {
    pub id: usize,
    pub train: Dataset,
    pub val: Dataset,
    /// MB/s.
    pub bandwidth: f64,
    pub performance_factor: f64,
    pub reliability: f64,
}

/// What one client uploads.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedUpdate {
    pub client_id: usize,
    pub q: ParamVector,
    pub weight: usize,
    /// L2 norm of the update after clipping and before noise.
    pub prenoise_l2: f64,
    pub epsilon_used: Option<f64>,
}

/// Privacy settings shared by every client in a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySettings {
    pub algorithm: Algorithm,
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub sensitivity: f64,
    pub gaussian_form: GaussianForm,
    pub lr_sensitivity: f64,
    pub lr_threshold: f64,
    pub initial_threshold: f64,
    pub window_mode: WindowMode,
}

/// Immutable view of the server state broadcast to every client in a round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub master_seed: u64,
    pub round: usize,
    pub total_rounds: usize,
    pub total_clients: usize,
    pub selected: usize,
    /// Training-set size summed over every client in the federation.
    pub n_total: usize,
    pub global: &'a Model,
    pub history: &'a HistoryWindow,
    pub threshold: f64,
    pub ema_sensitivity: f64,
    pub train: &'a TrainConfig,
    pub privacy: &'a PrivacySettings,
}

/// Client-side output plus the bookkeeping the server applies at the barrier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome {
    pub update: NoisedUpdate,
    pub budget: Option<BudgetState>,
    pub floored: bool,
    pub next_sensitivity: f64,
}

/// Uniform sample of `selected` distinct ids from `0..total`, ascending.
pub fn select_clients(total: usize, selected: usize, r: &mut StreamRng) -> Result<Vec<usize>, RoundError> {
    if selected == 0 || selected > total {
        return Err(RoundError::Selection { selected, total });
    }
    let mut ids = sample(r, total, selected).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Availability {
    pub participates: bool,
    pub reason: FailReason,
    pub duration_s: f64,
}

/// Decides whether a client reports back in time.
///
/// `duration = base_compute_s * performance_factor + 2 * payload / bandwidth`
/// (model down and up). A Bernoulli(1 - reliability) failure is drawn first.
pub fn simulate_availability(
    client: &ClientProfile,
    payload_bytes: usize,
    base_compute_s: f64,
    timeout_s: f64,
    r: &mut StreamRng,
) -> Availability {
    let transfer = 2.0 * payload_bytes as f64 / (client.bandwidth * 1e6);
    let duration_s = base_compute_s * client.performance_factor + transfer;
    let failed = r.random::<f64>() < 1.0 - client.reliability;
    let reason = if failed {
        FailReason::Failure
    } else if !(duration_s <= timeout_s) {
        FailReason::Timeout
    } else {
        FailReason::Ok
    };
    Availability {
        participates: reason == FailReason::Ok,
        reason,
        duration_s,
    }
}

/// Runs the full client pipeline: local training, update, budget
/// adjustment, optional clipping, similarity scaling and noise.
pub fn client_round(
    ctx: &RoundContext<'_>,
    client: &ClientProfile,
    budget: &BudgetState,
) -> Result<ClientOutcome, ClientError> {
    if client.train.is_empty() {
        return Err(ClientError::NoTrainingData);
    }
    let privacy = ctx.privacy;
    let algo = privacy.algorithm;
    let train_cfg = TrainConfig {
        seed: rng::stream_seed(
            ctx.master_seed,
            Stream::Train { round: ctx.round as u64, client: client.id as u64 },
        ),
        ..ctx.train.clone()
    };
    let local = train_local(ctx.global, &client.train, &train_cfg)?;
    let mut delta = compute_update(ctx.global, &local)?;

    if !algo.is_private() {
        return Ok(ClientOutcome {
            update: NoisedUpdate {
                client_id: client.id,
                prenoise_l2: l2_norm(&delta),
                q: delta,
                weight: client.train.len(),
                epsilon_used: None,
            },
            budget: None,
            floored: false,
            next_sensitivity: ctx.ema_sensitivity,
        });
    }

    let similarity = cosine_similarity(ctx.global.params(), local.params())?;
    let (state, floored) = if ctx.round <= 1 || ctx.history.is_empty() {
        (*budget, false)
    } else {
        let p = adjustment_coefficient(
            similarity,
            ctx.total_clients,
            ctx.selected,
            client.train.len(),
            ctx.n_total,
        );
        let score = compute_score(ctx.history, ctx.round, ctx.total_rounds, ctx.selected, privacy.window_mode)?;
        let adjusted = budget.adjust(p, score.score);
        (adjusted.state, adjusted.floored)
    };
    let epsilon = state.epsilon_current;

    let mut next_sensitivity = ctx.ema_sensitivity;
    let scale = match algo {
        Algorithm::ApbLap => laplace_scale(privacy.sensitivity, epsilon)?,
        Algorithm::ApbGauss => gaussian_sigma(
            privacy.sensitivity,
            epsilon,
            privacy.delta.unwrap_or(f64::NAN),
            privacy.gaussian_form,
        )?,
        Algorithm::ApbGaclip => {
            delta = clip_l2(&delta, ctx.threshold);
            next_sensitivity = ema_update(ctx.ema_sensitivity, privacy.lr_sensitivity, ctx.threshold);
            gaussian_sigma(
                next_sensitivity,
                epsilon,
                privacy.delta.unwrap_or(f64::NAN),
                privacy.gaussian_form,
            )?
        }
        Algorithm::NoDp => unreachable!("handled above"),
    };
    let prenoise_l2 = l2_norm(&delta);
    let mut noise_rng = rng::stream(
        ctx.master_seed,
        Stream::Noise { round: ctx.round as u64, client: client.id as u64 },
    );
    let noise = sample_noise(algo.mechanism(), scale, delta.dim(), &mut noise_rng)?;
    let q = linear_combine(&[similarity, 1.0], &[&delta, &noise])?;

    Ok(ClientOutcome {
        update: NoisedUpdate {
            client_id: client.id,
            q,
            weight: client.train.len(),
            prenoise_l2,
            epsilon_used: Some(epsilon),
        },
        budget: Some(state),
        floored,
        next_sensitivity,
    })
}

/// `n_i / Σ n` for updates sorted by ascending client id.
pub fn aggregation_weights(updates: &[&NoisedUpdate]) -> Vec<f64> {
    let total: usize = updates.iter().map(|u| u.weight).sum();
    updates
        .iter()
        .map(|u| u.weight as f64 / total as f64)
        .collect()
}

/// Sample-weighted mean of the uploaded updates, summed in ascending client
/// id order. FedAvg and FedProx aggregate identically; they differ only in
/// the client-side proximal term.
pub fn aggregate(updates: &[NoisedUpdate], _strategy: Aggregation) -> Result<ParamVector, RoundError> {
    if updates.is_empty() {
        return Err(RoundError::NoUpdates);
    }
    let mut sorted: Vec<&NoisedUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let weights = aggregation_weights(&sorted);
    let vectors: Vec<&ParamVector> = sorted.iter().map(|u| &u.q).collect();
    Ok(linear_combine(&weights, &vectors)?)
}

/// `A - aggregate`: updates point from the local models back to the global
/// one, so subtracting moves the global model toward the clients.
pub fn apply_aggregate(global: &Model, agg: &ParamVector) -> Result<Model, RoundError> {
    let params = global.params().sub(agg)?;
    Ok(global.with_params(params)?)
}

/// Nearest-rank 90th percentile: the `ceil(0.9 n)`-th smallest value.
pub fn percentile_90(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (9 * sorted.len()).div_ceil(10);
    Some(sorted[rank - 1])
}

/// EMA of the threshold toward the 90th percentile of this round's
/// pre-noise norms. An empty round leaves the threshold unchanged.
pub fn update_threshold(previous: f64, prenoise_norms: &[f64], lr_threshold: f64) -> f64 {
    match percentile_90(prenoise_norms) {
        None => previous,
        Some(p90) => ema_update(previous, lr_threshold, p90).max(MIN_THRESHOLD),
    }
}
