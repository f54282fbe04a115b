use crate::boosting::{BaseLearner, WeightVector};
use crate::encoder::math::argmax;
use crate::error::{Error, Result};

/// Candidates must beat the incumbent by this fraction of the total weight,
/// so rounding noise in the weighted sums cannot reorder near-ties.
pub const STUMP_TIE_TOL: f64 = 1e-12;

/// `x[feature] <= threshold ? left : right`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
}

impl Stump {
    pub fn predict_one(&self, x: &[f64]) -> usize {
        if x[self.feature] <= self.threshold {
            self.left
        } else {
            self.right
        }
    }
}

pub(crate) fn check_features(features: &[Vec<f64>]) -> Result<usize> {
    let d = features.first().map_or(0, |r| r.len());
    if features.is_empty() || d == 0 {
        return Err(Error::Degenerate("empty feature matrix".into()));
    }
    if features.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("ragged feature matrix".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: "feature matrix".into(),
        });
    }
    Ok(d)
}

/// Exhaustive depth-1 tree: every feature, every midpoint between adjacent
/// distinct values, each branch labelled with its heaviest class.
#[derive(Debug, Clone, Copy)]
pub struct StumpLearner {
    pub num_classes: usize,
}

impl StumpLearner {
    pub fn fit_stump(&self, features: &[Vec<f64>], labels: &[usize], w: &[f64]) -> Result<Stump> {
        let d = check_features(features)?;
        let k = self.num_classes;
        let total: f64 = w.iter().sum();
        let mut best: Option<(f64, Stump)> = None;
        for f in 0..d {
            let mut order: Vec<usize> = (0..features.len()).collect();
            order.sort_by(|&a, &b| features[a][f].total_cmp(&features[b][f]).then(a.cmp(&b)));
            let mut right = vec![0.0; k];
            for (&y, &wi) in labels.iter().zip(w) {
                right[y] += wi;
            }
            let mut left = vec![0.0; k];
            for pos in 0..order.len() - 1 {
                let i = order[pos];
                left[labels[i]] += w[i];
                right[labels[i]] -= w[i];
                let (lo, hi) = (features[i][f], features[order[pos + 1]][f]);
                if lo == hi {
                    continue;
                }
                let (l, r) = (argmax(&left), argmax(&right));
                let correct = left[l] + right[r];
                let err = total - correct;
                let better = match &best {
                    None => true,
                    Some((b, _)) => err < b - STUMP_TIE_TOL * total,
                };
                if better {
                    let threshold = lo + (hi - lo) / 2.0;
                    best = Some((
                        err,
                        Stump {
                            feature: f,
                            threshold,
                            left: l,
                            right: r,
                        },
                    ));
                }
            }
        }
        best.map(|(_, s)| s)
            .ok_or_else(|| Error::Degenerate("every feature column is constant".into()))
    }
}

impl BaseLearner<Vec<f64>> for StumpLearner {
    type Model = Stump;

    fn fit(
        &mut self,
        _round: usize,
        inputs: &[Vec<f64>],
        labels: &[usize],
        weights: &WeightVector,
    ) -> Result<Stump> {
        self.fit_stump(inputs, labels, weights.as_slice())
    }

    fn predict(&self, model: &Stump, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(inputs.iter().map(|x| model.predict_one(x)).collect())
    }
}
