//! Held-out prediction error.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vmfreg_core::geometry::{separation_angle, Rotation3, UnitVector3};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty test set")]
    Empty,
    #[error("{predicted} predictions for {observed} observations")]
    Misaligned { predicted: usize, observed: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionError {
    /// Mean separation angle in radians.
    pub sep_angle: f64,
    /// Mean chord length between prediction and observation.
    pub rmse: f64,
}

/// Scores predicted direct modes against observed directions.
///
/// With a fitted rotation `Q̂` the chord is taken in the rotated frame,
/// `‖Q̂ᵀM̂ − Q̂ᵀE‖`; without one it is `‖M̂ − E‖` for an already normalized
/// prediction. The two agree for orthogonal `Q̂`.
pub fn evaluate(
    predicted: &[UnitVector3],
    observed: &[UnitVector3],
    q_hat: Option<&Rotation3>,
) -> Result<PredictionError, EvalError> {
    if predicted.len() != observed.len() {
        return Err(EvalError::Misaligned { predicted: predicted.len(), observed: observed.len() });
    }
    if observed.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = observed.len() as f64;
    let mut sep = 0.0;
    let mut chord = 0.0;
    for (m, e) in predicted.iter().zip(observed) {
        sep += separation_angle(m, e);
        chord += match q_hat {
            Some(q) => (m.rotate_inverse(q).as_vector() - e.rotate_inverse(q).as_vector()).norm(),
            None => (m.as_vector() - e.as_vector()).norm(),
        };
    }
    Ok(PredictionError { sep_angle: sep / n, rmse: chord / n })
}
