use serde::{Deserialize, Serialize};

use super::{
    check_weight_law, clamp_error, compute_alpha, init_weights_uniform, update_weights,
    weighted_error, wrong_mass, WeightVector,
};
use crate::error::{Error, Result};

/// A base learning algorithm that can be fitted under instance weights.
pub trait BaseLearner<X> {
    type Model;

    /// Trains the round-`round` member (1-based) with the current weights
    /// folded into its loss.
    fn fit(
        &mut self,
        round: usize,
        inputs: &[X],
        labels: &[usize],
        weights: &WeightVector,
    ) -> Result<Self::Model>;

    fn predict(&self, model: &Self::Model, inputs: &[X]) -> Result<Vec<usize>>;

    /// Optional held-out accuracy of a freshly fitted member, for the log.
    fn evaluate(&self, _model: &Self::Model) -> Result<Option<f64>> {
        Ok(None)
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutcome<M> {
    pub round: usize,
    pub model: M,
    /// Clamped weighted error.
    pub err: f64,
    pub alpha: f64,
    /// Training-set predictions recorded right after fitting.
    pub predictions: Vec<usize>,
    pub weights_before: WeightVector,
    pub weights_after: WeightVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub m: usize,
    pub err: f64,
    pub raw_err: f64,
    pub alpha: f64,
    pub train_acc: f64,
    pub dev_acc: Option<f64>,
    /// Total weight after this round's update.
    pub weight_sum: f64,
    pub wrong_fraction_before: f64,
    pub wrong_fraction_after: f64,
    /// False for the round that failed to beat chance and ended boosting.
    pub kept: bool,
}

#[derive(Debug, Clone)]
pub struct BoostRun<M> {
    pub rounds: Vec<RoundOutcome<M>>,
    pub log: Vec<RoundLog>,
    pub final_weights: WeightVector,
}

/// Runs up to `max_rounds` rounds. A round whose alpha is not positive is
/// discarded and ends the loop.
pub fn run_boosting<X, L: BaseLearner<X>>(
    learner: &mut L,
    inputs: &[X],
    labels: &[usize],
    num_classes: usize,
    max_rounds: usize,
) -> Result<BoostRun<L::Model>> {
    if max_rounds == 0 {
        return Err(Error::InvalidArgument(
            "need at least one boosting round".into(),
        ));
    }
    if inputs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} inputs, {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument("need K >= 2".into()));
    }
    let mut w = init_weights_uniform(inputs.len())?;
    let mut rounds = Vec::new();
    let mut log = Vec::new();

    for m in 1..=max_rounds {
        let model = learner.fit(m, inputs, labels, &w)?;
        let predictions = learner.predict(&model, inputs)?;
        let raw_err = weighted_error(&predictions, labels, &w)?;
        let (err, _) = clamp_error(raw_err);
        let alpha = compute_alpha(raw_err, num_classes);
        let train_acc = predictions
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count() as f64
            / labels.len() as f64;
        let dev_acc = learner.evaluate(&model)?;
        let (wrong, total) = wrong_mass(&w, &predictions, labels);

        if alpha <= 0.0 {
            log::warn!("round {m}: alpha {alpha} <= 0, stopping");
            log.push(RoundLog {
                m,
                err,
                raw_err,
                alpha,
                train_acc,
                dev_acc,
                weight_sum: total,
                wrong_fraction_before: wrong / total,
                wrong_fraction_after: wrong / total,
                kept: false,
            });
            break;
        }

        let next = update_weights(&w, &predictions, labels, alpha)
            .map_err(|_| Error::WeightOverflow { round: m })?;
        check_weight_law(m, &w, &next, &predictions, labels, alpha)?;
        let (wrong_after, total_after) = wrong_mass(&next, &predictions, labels);
        log.push(RoundLog {
            m,
            err,
            raw_err,
            alpha,
            train_acc,
            dev_acc,
            weight_sum: total_after,
            wrong_fraction_before: wrong / total,
            wrong_fraction_after: wrong_after / total_after,
            kept: true,
        });
        rounds.push(RoundOutcome {
            round: m,
            model,
            err,
            alpha,
            predictions,
            weights_before: std::mem::replace(&mut w, next.clone()),
            weights_after: next,
        });
    }

    if rounds.is_empty() {
        return Err(Error::NoUsefulLearner);
    }
    Ok(BoostRun {
        rounds,
        log,
        final_weights: w,
    })
}
