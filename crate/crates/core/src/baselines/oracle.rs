//! A standalone SAMME implementation over exhaustive decision stumps. It
//! shares no arithmetic with [`crate::boosting`] so the two can be diffed.

use std::fmt::Write as _;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::stump::{check_features, Stump, STUMP_TIE_TOL};
use crate::boosting::{BoostRun, ERR_EPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRound {
    pub m: usize,
    pub stump: Stump,
    pub err: f64,
    pub alpha: f64,
    /// Weights after this round's update.
    pub weights: Vec<f64>,
}

fn heaviest(mass: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..mass.len() {
        if mass[c] > mass[best] {
            best = c;
        }
    }
    best
}

fn best_stump(x: &[Vec<f64>], y: &[usize], w: &[f64], k: usize) -> Option<Stump> {
    let total: f64 = w.iter().sum();
    let mut best: Option<(f64, Stump)> = None;
    for f in 0..x[0].len() {
        let mut values: Vec<f64> = x.iter().map(|r| r[f]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for pair in values.windows(2) {
            let t = pair[0] + (pair[1] - pair[0]) / 2.0;
            let mut below = vec![0.0; k];
            let mut above = vec![0.0; k];
            for i in 0..x.len() {
                if x[i][f] <= t {
                    below[y[i]] += w[i];
                } else {
                    above[y[i]] += w[i];
                }
            }
            let (l, r) = (heaviest(&below), heaviest(&above));
            let mut err = 0.0;
            for c in 0..k {
                if c != l {
                    err += below[c];
                }
                if c != r {
                    err += above[c];
                }
            }
            if best
                .as_ref()
                .is_none_or(|(e, _)| err < e - STUMP_TIE_TOL * total)
            {
                best = Some((
                    err,
                    Stump {
                        feature: f,
                        threshold: t,
                        left: l,
                        right: r,
                    },
                ));
            }
        }
    }
    best.map(|(_, s)| s)
}

/// Runs up to `rounds` SAMME rounds; stops after the first round whose
/// coefficient is not positive (that round is not returned).
pub fn samme_oracle(
    x: &[Vec<f64>],
    y: &[usize],
    rounds: usize,
    k: usize,
) -> Result<Vec<OracleRound>> {
    check_features(x)?;
    if y.len() != x.len() || y.iter().any(|&c| c >= k) || k < 2 || rounds == 0 {
        return Err(Error::InvalidArgument(
            "oracle needs matching labels in [0, K), K >= 2, M >= 1".into(),
        ));
    }
    let n = x.len();
    let mut w = vec![1.0 / n as f64; n];
    let mut out = Vec::new();
    for m in 1..=rounds {
        let stump = best_stump(x, y, &w, k)
            .ok_or_else(|| Error::Degenerate("every feature column is constant".into()))?;
        let mut num = 0.0;
        let mut den = 0.0;
        let miss: Vec<bool> = (0..n).map(|i| stump.predict_one(&x[i]) != y[i]).collect();
        for i in 0..n {
            den += w[i];
            if miss[i] {
                num += w[i];
            }
        }
        let err = (num / den).clamp(ERR_EPS, 1.0 - ERR_EPS);
        let alpha = ((1.0 - err) / err).ln() + ((k - 1) as f64).ln();
        if alpha <= 0.0 {
            break;
        }
        let boost = alpha.exp();
        for i in 0..n {
            if miss[i] {
                w[i] *= boost;
            }
        }
        out.push(OracleRound {
            m,
            stump,
            err,
            alpha,
            weights: w.clone(),
        });
    }
    Ok(out)
}

/// Plain-text trajectory, one `round` line and one `w` line per round.
pub fn format_trajectory(rounds: &[OracleRound]) -> String {
    let mut s = String::from("# m feature threshold left right err alpha, then weights\n");
    for r in rounds {
        let _ = writeln!(
            s,
            "round {} {} {:.17e} {} {} {:.17e} {:.17e}",
            r.m, r.stump.feature, r.stump.threshold, r.stump.left, r.stump.right, r.err, r.alpha
        );
        let w: Vec<String> = r.weights.iter().map(|v| format!("{v:.17e}")).collect();
        let _ = writeln!(s, "w {}", w.join(" "));
    }
    s
}

/// Largest absolute disagreement in err, alpha and weights, or `None` when
/// the round counts or chosen stumps differ.
pub fn trajectory_gap(oracle: &[OracleRound], run: &BoostRun<Stump>) -> Option<f64> {
    if oracle.len() != run.rounds.len() {
        return None;
    }
    let mut gap: f64 = 0.0;
    for (o, r) in oracle.iter().zip(&run.rounds) {
        if o.stump != r.model {
            return None;
        }
        gap = gap
            .max((o.err - r.err).abs())
            .max((o.alpha - r.alpha).abs());
        for (a, b) in o.weights.iter().zip(r.weights_after.as_slice()) {
            gap = gap.max((a - b).abs());
        }
    }
    Some(gap)
}

/// A small labelled feature matrix.
#[derive(Debug, Clone)]
pub struct Problem {
    pub name: &'static str,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Three fixed problems: noisy 3-class blobs, 4 classes on 3 features, and
/// a 2-class checkerboard no single stump can fit.
pub fn reference_problems(seed: u64) -> Vec<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blobs = Problem {
        name: "blobs",
        features: vec![],
        labels: vec![],
        num_classes: 3,
    };
    let centers = [(0.0, 0.0), (2.0, 0.5), (1.0, 2.0)];
    for i in 0..150 {
        let c = i % 3;
        let (cx, cy) = centers[c];
        blobs.features.push(vec![
            cx + rng.random_range(-1.2..1.2),
            cy + rng.random_range(-1.2..1.2),
        ]);
        blobs.labels.push(c);
    }
    let mut quad = Problem {
        name: "four-class",
        features: vec![],
        labels: vec![],
        num_classes: 4,
    };
    for _ in 0..200 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut c = (x[0] > 0.5) as usize + 2 * (x[1] + 0.3 * x[2] > 0.65) as usize;
        if rng.random_range(0.0..1.0) < 0.1 {
            c = rng.random_range(0..4);
        }
        quad.features.push(x);
        quad.labels.push(c);
    }
    let mut board = Problem {
        name: "checkerboard",
        features: vec![],
        labels: vec![],
        num_classes: 2,
    };
    for _ in 0..100 {
        let (a, b) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        board.labels.push(((a > 0.5) ^ (b > 0.5)) as usize);
        board.features.push(vec![a, b]);
    }
    vec![blobs, quad, board]
}
