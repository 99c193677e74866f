//! Noise calibration, samplers, L2 clipping and EMA smoothing.
//!
//! Samplers are hand-rolled (inverse-CDF Laplace, Box-Muller Gaussian) on top
//! of a caller-supplied stream so that every draw is reproducible from the
//! master seed.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_ordered, ExecMode};
use crate::param::{l2_norm, ParamError, ParamVector};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NoiseError {
    #[error("privacy budget collapsed: epsilon = {0} gives no usable noise scale")]
    BudgetCollapse(f64),
    #[error("sensitivity must be positive and finite, got {0}")]
    InvalidSensitivity(f64),
    #[error("delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("noise scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error(
        "{trials} trials cannot resolve epsilon = {epsilon}; use at least {needed} trials \
         (or a smaller epsilon)"
    )]
    TooFewTrials { trials: u64, epsilon: f64, needed: u64 },
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    None,
    Laplace,
    Gaussian,
}

/// Which variance formula calibrates Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GaussianForm {
    /// `sigma = df * sqrt(2 ln(1.25/delta)) / eps`, the classical
    /// (eps, delta) calibration.
    #[default]
    Standard,
    /// `sigma = df * sqrt(ln(1.25/delta)) / eps`, the variant without the
    /// factor 2.
    NoFactorTwo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    pub mechanism: Mechanism,
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub sensitivity: f64,
    pub gaussian_form: GaussianForm,
}

impl DpParams {
    /// Laplace `b` or Gaussian `sigma` for these parameters; `None` for the
    /// noiseless mechanism.
    pub fn noise_scale(&self) -> Result<Option<f64>, NoiseError> {
        match self.mechanism {
            Mechanism::None => Ok(None),
            Mechanism::Laplace => laplace_scale(self.sensitivity, self.epsilon).map(Some),
            Mechanism::Gaussian => gaussian_sigma(
                self.sensitivity,
                self.epsilon,
                self.delta.ok_or(NoiseError::InvalidDelta(f64::NAN))?,
                self.gaussian_form,
            )
            .map(Some),
        }
    }
}

fn check_inputs(sensitivity: f64, epsilon: f64) -> Result<(), NoiseError> {
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(NoiseError::InvalidSensitivity(sensitivity));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(NoiseError::BudgetCollapse(epsilon));
    }
    Ok(())
}

fn finite_scale(scale: f64, epsilon: f64) -> Result<f64, NoiseError> {
    if scale.is_finite() {
        Ok(scale)
    } else {
        Err(NoiseError::BudgetCollapse(epsilon))
    }
}

/// Laplace scale `b = sensitivity / epsilon`.
pub fn laplace_scale(sensitivity: f64, epsilon: f64) -> Result<f64, NoiseError> {
    check_inputs(sensitivity, epsilon)?;
    finite_scale(sensitivity / epsilon, epsilon)
}

pub fn gaussian_sigma(
    sensitivity: f64,
    epsilon: f64,
    delta: f64,
    form: GaussianForm,
) -> Result<f64, NoiseError> {
    check_inputs(sensitivity, epsilon)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(NoiseError::InvalidDelta(delta));
    }
    let log_term = (1.25 / delta).ln();
    let root = match form {
        GaussianForm::Standard => (2.0 * log_term).sqrt(),
        GaussianForm::NoFactorTwo => log_term.sqrt(),
    };
    finite_scale(sensitivity * root / epsilon, epsilon)
}

/// Uniform draw strictly inside `(0, 1)`.
fn open_unit<R: RngCore + ?Sized>(r: &mut R) -> f64 {
    ((r.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// One Laplace(0, b) draw by inverse CDF.
pub fn laplace_draw<R: RngCore + ?Sized>(b: f64, r: &mut R) -> f64 {
    let u = open_unit(r) - 0.5;
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Two independent N(0, sigma^2) draws by Box-Muller.
pub fn gaussian_pair<R: RngCore + ?Sized>(sigma: f64, r: &mut R) -> (f64, f64) {
    let u1 = open_unit(r);
    let u2 = open_unit(r);
    let radius = sigma * (-2.0 * u1.ln()).sqrt();
    let angle = std::f64::consts::TAU * u2;
    (radius * angle.cos(), radius * angle.sin())
}

fn fill_noise<R: RngCore + ?Sized>(mechanism: Mechanism, scale: f64, out: &mut [f64], r: &mut R) {
    match mechanism {
        Mechanism::None => out.iter_mut().for_each(|x| *x = 0.0),
        Mechanism::Laplace => out.iter_mut().for_each(|x| *x = laplace_draw(scale, r)),
        Mechanism::Gaussian => {
            for pair in out.chunks_mut(2) {
                let (a, b) = gaussian_pair(scale, r);
                pair[0] = a;
                if let Some(x) = pair.get_mut(1) {
                    *x = b;
                }
            }
        }
    }
}

/// `dim` i.i.d. noise coordinates. `Mechanism::None` yields the zero vector.
pub fn sample_noise<R: RngCore + ?Sized>(
    mechanism: Mechanism,
    scale: f64,
    dim: usize,
    r: &mut R,
) -> Result<ParamVector, NoiseError> {
    if dim == 0 {
        return Err(NoiseError::ZeroDimension);
    }
    if mechanism != Mechanism::None && !(scale > 0.0 && scale.is_finite()) {
        return Err(NoiseError::InvalidScale(scale));
    }
    let mut out = vec![0.0; dim];
    fill_noise(mechanism, scale, &mut out, r);
    Ok(ParamVector::new(out)?)
}

/// Scales `v` down onto the L2 ball of radius `threshold`; vectors already
/// inside the ball are returned unchanged.
pub fn clip_l2(v: &ParamVector, threshold: f64) -> ParamVector {
    let norm = l2_norm(v);
    if norm <= threshold {
        return v.clone();
    }
    let factor = threshold / norm;
    let mut clipped = v.scale(factor).expect("factor < 1 keeps values finite");
    // Rounding can leave the norm a few ulps above the threshold.
    while l2_norm(&clipped) > threshold {
        clipped = clipped.scale(1.0 - f64::EPSILON).expect("finite");
    }
    clipped
}

/// `(1 - lr) * old + lr * target`.
pub fn ema_update(old: f64, lr: f64, target: f64) -> f64 {
    (1.0 - lr) * old + lr * target
}

/// Adaptive clipping state carried by the server between rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipState {
    pub threshold: f64,
    pub ema_sensitivity: f64,
    pub lr_threshold: f64,
    pub lr_sensitivity: f64,
}

impl ClipState {
    pub fn new(
        threshold: f64,
        sensitivity: f64,
        lr_threshold: f64,
        lr_sensitivity: f64,
    ) -> Result<Self, NoiseError> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(NoiseError::InvalidScale(threshold));
        }
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(NoiseError::InvalidSensitivity(sensitivity));
        }
        Ok(Self {
            threshold,
            ema_sensitivity: sensitivity,
            lr_threshold,
            lr_sensitivity,
        })
    }

    /// Sensitivity after one EMA step toward the current threshold.
    pub fn next_sensitivity(&self) -> f64 {
        ema_update(self.ema_sensitivity, self.lr_sensitivity, self.threshold)
    }
}

/// Monte-Carlo check of the (eps, delta)-DP inequality for a counting query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpCheckConfig {
    pub mechanism: Mechanism,
    pub epsilon: f64,
    pub delta: f64,
    pub gaussian_form: GaussianForm,
    pub trials: u64,
    /// Multiplies the calibrated noise scale. 1.0 is the correct mechanism;
    /// values below 1 deliberately under-noise it.
    pub scale_multiplier: f64,
}

impl DpCheckConfig {
    pub fn new(mechanism: Mechanism, epsilon: f64, delta: f64, trials: u64) -> Self {
        Self {
            mechanism,
            epsilon,
            delta,
            gaussian_form: GaussianForm::Standard,
            trials,
            scale_multiplier: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpCheckReport {
    /// Worst value of `P_a(bin) - e^eps * P_b(bin) - delta - 3 * SE` over all
    /// bins and both directions. Positive means the inequality is violated
    /// beyond Monte-Carlo error.
    pub max_ratio_violation: f64,
    pub passed: bool,
    /// Lower edge of the bin attaining the worst margin.
    pub worst_bin_start: f64,
    pub noise_scale: f64,
}

pub const DP_CHECK_MIN_TRIALS: u64 = 1_000_000;
pub const DP_CHECK_LOW: f64 = 5.0;
pub const DP_CHECK_HIGH: f64 = 16.0;
pub const DP_CHECK_BIN_WIDTH: f64 = 0.25;
const DP_CHECK_CHUNK: u64 = 1 << 16;
/// Smallest bin probability, relative to `e^eps / trials`, the check can
/// still resolve.
const DP_CHECK_RESOLUTION: f64 = 1e-3;

pub fn dp_check_bins() -> usize {
    ((DP_CHECK_HIGH - DP_CHECK_LOW) / DP_CHECK_BIN_WIDTH).round() as usize
}

/// Neighboring datasets differ by one record: `f(D1) = 10`, `f(D2) = 11`,
/// `sensitivity = 1`. Outputs are binned into width-0.25 intervals over
/// `[5, 16]` and the DP inequality is tested in both directions with a
/// three-standard-error allowance.
pub fn empirical_dp_check(
    cfg: &DpCheckConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<DpCheckReport, NoiseError> {
    let needed = ((cfg.epsilon.exp() / DP_CHECK_RESOLUTION).ceil() as u64).max(DP_CHECK_MIN_TRIALS);
    if cfg.trials < needed {
        return Err(NoiseError::TooFewTrials {
            trials: cfg.trials,
            epsilon: cfg.epsilon,
            needed,
        });
    }
    let params = DpParams {
        mechanism: cfg.mechanism,
        epsilon: cfg.epsilon,
        delta: (cfg.mechanism == Mechanism::Gaussian).then_some(cfg.delta),
        sensitivity: 1.0,
        gaussian_form: cfg.gaussian_form,
    };
    let scale = params.noise_scale()?.unwrap_or(0.0) * cfg.scale_multiplier;
    if cfg.mechanism != Mechanism::None && !(scale > 0.0) {
        return Err(NoiseError::InvalidScale(scale));
    }

    let bins = dp_check_bins();
    let chunks: Vec<u64> = (0..cfg.trials.div_ceil(DP_CHECK_CHUNK)).collect();
    let partial = map_ordered(mode, &chunks, |&chunk| {
        let mut r = rng::stream(seed, Stream::DpCheck { chunk });
        let n = DP_CHECK_CHUNK.min(cfg.trials - chunk * DP_CHECK_CHUNK) as usize;
        let mut counts = vec![[0u64; 2]; bins];
        let mut noise = vec![0.0; n];
        for (side, centre) in [10.0, 11.0].into_iter().enumerate() {
            fill_noise(cfg.mechanism, scale, &mut noise, &mut r);
            for &z in &noise {
                let x = centre + z;
                if (DP_CHECK_LOW..DP_CHECK_HIGH).contains(&x) {
                    let b = ((x - DP_CHECK_LOW) / DP_CHECK_BIN_WIDTH) as usize;
                    counts[b.min(bins - 1)][side] += 1;
                }
            }
        }
        counts
    });
    let mut counts = vec![[0u64; 2]; bins];
    for part in partial {
        for (acc, c) in counts.iter_mut().zip(part) {
            acc[0] += c[0];
            acc[1] += c[1];
        }
    }

    let n = cfg.trials as f64;
    let e = cfg.epsilon.exp();
    let mut worst = (f64::NEG_INFINITY, DP_CHECK_LOW);
    for (b, c) in counts.iter().enumerate() {
        let p = [c[0] as f64 / n, c[1] as f64 / n];
        for (a, o) in [(0, 1), (1, 0)] {
            let se = (p[a] * (1.0 - p[a]) / n + e * e * p[o] * (1.0 - p[o]) / n).sqrt();
            let margin = p[a] - e * p[o] - cfg.delta - 3.0 * se;
            if margin > worst.0 {
                worst = (margin, DP_CHECK_LOW + b as f64 * DP_CHECK_BIN_WIDTH);
            }
        }
    }
    Ok(DpCheckReport {
        max_ratio_violation: worst.0,
        passed: worst.0 <= 0.0,
        worst_bin_start: worst.1,
        noise_scale: scale,
    })
}

/// Draws from a stream for tests and benches that want a raw sampler.
pub fn draw_many(mechanism: Mechanism, scale: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    let mut out = vec![0.0; n];
    fill_noise(mechanism, scale, &mut out, &mut r);
    out
}
