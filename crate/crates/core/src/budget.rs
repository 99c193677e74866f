//! Adaptive privacy budget: adjustment coefficient, the 30/40/30 score and
//! the decrease-or-reset rule.
//!
//! When the score exceeds 50 and the coefficient `p` is at most 1, a client's
//! budget shrinks to `p` times its previous value; otherwise it is reset to
//! the initial budget. Budgets therefore never exceed their initial value.
//!
//! The reset target is the initial budget, not the budget passed in. A
//! literal reading of the pseudocode would return the input unchanged, which
//! after a few decreases is the already shrunken value; that reading never
//! recovers and is not implemented.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The budget floor as a fraction of the initial budget. `p` can be exactly
/// zero, and a zero budget would make every noise scale infinite.
pub const EPSILON_FLOOR_FRACTION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BudgetError {
    #[error("round {t} outside 1..={total}")]
    RoundOutOfRange { t: usize, total: usize },
    #[error("initial budget must be positive and finite, got {0}")]
    InvalidBudget(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    /// Sum the accuracy window, as the scoring rule is literally written.
    #[default]
    Sum,
    /// Average over the entries actually accumulated.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetState {
    pub client_id: usize,
    pub epsilon_current: f64,
    pub epsilon_initial: f64,
}

/// Result of one [`BudgetState::adjust`] call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adjusted {
    pub state: BudgetState,
    /// The decrease branch hit the budget floor.
    pub floored: bool,
    /// The reset branch was taken.
    pub reset: bool,
}

impl BudgetState {
    pub fn new(client_id: usize, epsilon_initial: f64) -> Result<Self, BudgetError> {
        if !(epsilon_initial > 0.0 && epsilon_initial.is_finite()) {
            return Err(BudgetError::InvalidBudget(epsilon_initial));
        }
        Ok(Self {
            client_id,
            epsilon_current: epsilon_initial,
            epsilon_initial,
        })
    }

    pub fn floor(&self) -> f64 {
        EPSILON_FLOOR_FRACTION * self.epsilon_initial
    }

    /// Decrease to `p * current` when `score > 50 && p <= 1`, otherwise reset
    /// to the initial budget.
    pub fn adjust(&self, p: f64, score: f64) -> Adjusted {
        if score > 50.0 && p <= 1.0 {
            let target = p * self.epsilon_current;
            let floored = target < self.floor();
            Adjusted {
                state: BudgetState {
                    epsilon_current: if floored { self.floor() } else { target },
                    ..*self
                },
                floored,
                reset: false,
            }
        } else {
            Adjusted {
                state: BudgetState {
                    epsilon_current: self.epsilon_initial,
                    ..*self
                },
                floored: false,
                reset: true,
            }
        }
    }
}

/// Free-function form of [`BudgetState::adjust`].
pub fn adjust(state: &BudgetState, p: f64, score: f64) -> BudgetState {
    state.adjust(p, score).state
}

/// Global accuracy and loss of every completed round, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryWindow {
    pub acc: Vec<f64>,
    pub loss: Vec<f64>,
}

impl HistoryWindow {
    pub fn push(&mut self, acc: f64, loss: f64) {
        self.acc.push(acc);
        self.loss.push(loss);
    }

    pub fn len(&self) -> usize {
        self.acc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }

    pub fn last(&self) -> Option<(f64, f64)> {
        Some((*self.acc.last()?, *self.loss.last()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub score_loss: f64,
    pub score_acc: f64,
    pub score_t: f64,
    pub score: f64,
}

/// `|1 - s_c * M * n_i / (N * n_total)|` for non-negative similarity, else 1.
pub fn adjustment_coefficient(
    s_c: f64,
    total_clients: usize,
    selected: usize,
    n_i: usize,
    n_total: usize,
) -> f64 {
    if s_c >= 0.0 {
        let num = s_c * total_clients as f64 * n_i as f64;
        let den = selected as f64 * n_total as f64;
        (1.0 - num / den).abs()
    } else {
        1.0
    }
}

/// Scores round `t` of `total_rounds` from the history of rounds `1..t`.
///
/// The accuracy window visits history positions `t-1-N+o` for `o` in
/// `0..N` (0-based), skipping negative positions, and so covers the most
/// recent `N` rounds, including the latest one it is compared against.
pub fn compute_score(
    history: &HistoryWindow,
    t: usize,
    total_rounds: usize,
    selected: usize,
    mode: WindowMode,
) -> Result<ScoreBreakdown, BudgetError> {
    if t == 0 || t > total_rounds {
        return Err(BudgetError::RoundOutOfRange { t, total: total_rounds });
    }
    let len = history.len();
    let score_loss = match history.loss.as_slice() {
        [.., prev, last] if last >= prev => 1.0,
        _ => 0.0,
    };

    let score_acc = match history.acc.last() {
        None => 0.0,
        Some(&latest) => {
            let mut temp = 0.0;
            let mut count = 0usize;
            for o in 0..selected {
                let pos = (t as i64) - 1 - (selected as i64) + (o as i64);
                if pos < 0 || pos as usize >= len {
                    continue;
                }
                temp += history.acc[pos as usize];
                count += 1;
            }
            if mode == WindowMode::Mean && count > 0 {
                temp /= count as f64;
            }
            if count > 0 && temp >= latest {
                1.0
            } else {
                0.0
            }
        }
    };

    let score_t = if 2 * t >= total_rounds {
        1.0
    } else {
        2.0 * t as f64 / total_rounds as f64
    };
    Ok(ScoreBreakdown {
        score_loss,
        score_acc,
        score_t,
        score: 30.0 * score_loss + 40.0 * score_acc + 30.0 * score_t,
    })
}
