//! Multi-class boosting: instance weights, weighted error, member
//! coefficients with the `ln(K - 1)` term, unnormalized weight updates, and
//! alpha-weighted voting over the trained members.

mod engine;
mod ensemble;
mod learner;

use log::warn;
use serde::{Deserialize, Serialize};

pub use engine::{run_boosting, BaseLearner, BoostRun, RoundLog, RoundOutcome};
pub use ensemble::{discrete_vote, soft_vote, BoostEnsemble, BoostRound, Member, ENSEMBLE_MAGIC};
pub(crate) use learner::accuracy;
pub use learner::{
    boost_train, single_baseline, BoostConfig, BoostContext, BoostTraining, EncoderLearner,
};

use crate::error::{Error, Result};

/// Lower clamp on the weighted error; the upper clamp is `1 - ERR_EPS`.
pub const ERR_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// Every member owns its full parameter set.
    Privacy,
    /// Members share one trunk and own only their classification heads.
    Sharing,
}

impl SharingMode {
    pub fn name(self) -> &'static str {
        match self {
            SharingMode::Privacy => "privacy",
            SharingMode::Sharing => "sharing",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteKind {
    /// `score(k) = sum_m alpha_m * p_m[k]`
    #[default]
    Soft,
    /// `score(k) = sum_m alpha_m * 1(argmax p_m = k)`
    Discrete,
}

/// Positive, finite per-example weights. Never renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if let Some(bad) = w.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "weight {bad} is not positive and finite"
            )));
        }
        Ok(WeightVector(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

pub fn init_weights_uniform(n: usize) -> Result<WeightVector> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "cannot weight an empty training set".into(),
        ));
    }
    WeightVector::new(vec![1.0 / n as f64; n])
}

/// `sum_i w_i 1(pred_i != y_i) / sum_i w_i`
pub fn weighted_error(predictions: &[usize], labels: &[usize], w: &WeightVector) -> Result<f64> {
    if predictions.len() != labels.len() || labels.len() != w.len() {
        return Err(Error::Shape(format!(
            "{} predictions, {} labels, {} weights",
            predictions.len(),
            labels.len(),
            w.len()
        )));
    }
    let mut wrong = 0.0;
    let mut total = 0.0;
    for ((p, y), wi) in predictions.iter().zip(labels).zip(w.as_slice()) {
        total += wi;
        if p != y {
            wrong += wi;
        }
    }
    Ok(wrong / total)
}

/// Clamps an error rate into `[ERR_EPS, 1 - ERR_EPS]`; the flag reports
/// whether clamping happened.
pub fn clamp_error(err: f64) -> (f64, bool) {
    let clamped = err.clamp(ERR_EPS, 1.0 - ERR_EPS);
    (clamped, clamped != err)
}

/// `ln((1 - err) / err) + ln(K - 1)` on the clamped error.
pub fn compute_alpha(err: f64, num_classes: usize) -> f64 {
    let (e, clamped) = clamp_error(err);
    if clamped {
        warn!("weighted error {err} clamped to {e}");
    }
    ((1.0 - e) / e).ln() + ((num_classes as f64) - 1.0).ln()
}

/// `w_i <- w_i * exp(alpha * 1(pred_i != y_i))`, without renormalizing.
pub fn update_weights(
    w: &WeightVector,
    predictions: &[usize],
    labels: &[usize],
    alpha: f64,
) -> Result<WeightVector> {
    if !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} is not finite"
        )));
    }
    if predictions.len() != w.len() || labels.len() != w.len() {
        return Err(Error::Shape(
            "predictions, labels and weights differ in length".into(),
        ));
    }
    let factor = alpha.exp();
    let out: Vec<f64> = w
        .as_slice()
        .iter()
        .zip(predictions.iter().zip(labels))
        .map(|(&wi, (p, y))| if p != y { wi * factor } else { wi })
        .collect();
    WeightVector::new(out).map_err(|_| Error::WeightOverflow { round: 0 })
}

/// Mass on misclassified examples: `(sum over wrong, total)`.
pub fn wrong_mass(w: &WeightVector, predictions: &[usize], labels: &[usize]) -> (f64, f64) {
    let mut wrong = 0.0;
    let mut total = 0.0;
    for ((wi, p), y) in w.as_slice().iter().zip(predictions).zip(labels) {
        total += wi;
        if p != y {
            wrong += wi;
        }
    }
    (wrong, total)
}

/// Relative tolerance for the total-weight identity; the two sides sum the
/// same terms in a different order.
pub const WEIGHT_LAW_RTOL: f64 = 1e-12;

/// Verifies that the new total equals `sum_correct w + e^alpha sum_wrong w`
/// and that the misclassified mass fraction grew when `alpha > 0`.
pub fn check_weight_law(
    round: usize,
    before: &WeightVector,
    after: &WeightVector,
    predictions: &[usize],
    labels: &[usize],
    alpha: f64,
) -> Result<()> {
    let (wrong, total) = wrong_mass(before, predictions, labels);
    let expected = (total - wrong) + alpha.exp() * wrong;
    let actual = after.sum();
    if (actual - expected).abs() > WEIGHT_LAW_RTOL * expected.abs() {
        return Err(Error::WeightLaw {
            round,
            detail: format!("total {actual} != expected {expected}"),
        });
    }
    let (wrong_after, total_after) = wrong_mass(after, predictions, labels);
    if alpha > 0.0 && wrong > 0.0 && wrong < total && wrong_after / total_after <= wrong / total {
        return Err(Error::WeightLaw {
            round,
            detail: format!(
                "misclassified fraction {} did not grow from {}",
                wrong_after / total_after,
                wrong / total
            ),
        });
    }
    Ok(())
}
