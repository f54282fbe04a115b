//! Stage-two ensembling: an MLP over the concatenated, alpha-scaled class
//! distributions of the frozen boosting members.
//!
//! `BGF1` head container:
//!
//! ```text
//! magic "BGF1" | u64 ensemble hash | u32 input dim | u32 K | u32 depth
//! | u32 width per hidden layer | u64 count + f64 params
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boosting::BoostEnsemble;
use crate::encoder::checkpoint::{read_array, read_f64_block, read_u32, read_u64, write_f64_block};
use crate::encoder::math::{
    affine, affine_grad_input, affine_grad_params, argmax, softmax_in_place,
};
use crate::encoder::{xavier_bound, Adam, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::textdata::EncodedExample;

pub const FUSION_MAGIC: &[u8; 4] = b"BGF1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Hidden layers, 0 to 3. Zero makes the head linear.
    pub depth: usize,
    /// Hidden width; `None` means `4 * M * K`.
    pub width: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a dev-accuracy improvement before stopping.
    pub patience: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            depth: 1,
            width: None,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 20,
            patience: 3,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth > 3 {
            return Err(Error::Config(format!(
                "fusion depth {} outside 0..=3",
                self.depth
            )));
        }
        if self.width == Some(0)
            || self.batch_size == 0
            || self.max_epochs == 0
            || !(self.learning_rate > 0.0)
        {
            return Err(Error::Config(
                "fusion width, batch size, epochs and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub ensemble_hash: u64,
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden: Vec<usize>,
    pub params: Vec<f64>,
}

/// Concatenation over members of `alpha_m * p_m`, from per-member rows
/// indexed `[member][example][class]`.
pub fn features_from_probs(alphas: &[f64], probs: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = probs.first().map_or(0, |p| p.len());
    (0..n)
        .map(|i| {
            alphas
                .iter()
                .zip(probs)
                .flat_map(|(a, p)| p[i].iter().map(move |v| a * v))
                .collect()
        })
        .collect()
}

pub fn build_features(
    ensemble: &BoostEnsemble,
    examples: &[EncodedExample],
) -> Result<Vec<Vec<f64>>> {
    Ok(features_from_probs(
        &ensemble.alphas(),
        &ensemble.member_probs(examples)?,
    ))
}

pub fn build_feature(ensemble: &BoostEnsemble, example: &EncodedExample) -> Result<Vec<f64>> {
    Ok(build_features(ensemble, std::slice::from_ref(example))?.remove(0))
}

impl FusionHead {
    fn dims(input_dim: usize, hidden: &[usize], k: usize) -> Vec<usize> {
        let mut d = vec![input_dim];
        d.extend_from_slice(hidden);
        d.push(k);
        d
    }

    fn param_count(input_dim: usize, hidden: &[usize], k: usize) -> usize {
        Self::dims(input_dim, hidden, k)
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// All-zero head; it outputs the uniform distribution.
    pub fn zeros(
        input_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
        ensemble_hash: u64,
    ) -> Self {
        let n = Self::param_count(input_dim, &hidden, num_classes);
        FusionHead {
            ensemble_hash,
            input_dim,
            num_classes,
            hidden,
            params: vec![0.0; n],
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn random(
        input_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
        ensemble_hash: u64,
        seed: u64,
    ) -> Self {
        let mut head = Self::zeros(input_dim, hidden, num_classes, ensemble_hash);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut at = 0;
        for w in Self::dims(input_dim, &head.hidden, num_classes).windows(2) {
            let a = xavier_bound(w[0], w[1]);
            for p in &mut head.params[at..at + w[0] * w[1]] {
                *p = rng.random_range(-a..a);
            }
            at += w[0] * w[1] + w[1];
        }
        head
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Layer inputs (after activation) followed by the logits.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let dims = Self::dims(self.input_dim, &self.hidden, self.num_classes);
        let mut acts = vec![x.to_vec()];
        let mut at = 0;
        for (l, w) in dims.windows(2).enumerate() {
            let (m, n) = (w[0], w[1]);
            let weight = &self.params[at..at + m * n];
            let bias = &self.params[at + m * n..at + m * n + n];
            let mut y = affine(acts.last().expect("input"), 1, m, weight, bias, n);
            if l + 1 < dims.len() - 1 {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(y);
            at += m * n + n;
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "fusion feature of length {}, head expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(self.activations(x).pop().expect("logits"))
    }

    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut l = self.logits(x)?;
        softmax_in_place(&mut l);
        Ok(l)
    }

    /// Batch-mean cross-entropy and its gradient.
    pub fn gradient(&self, xs: &[Vec<f64>], labels: &[usize]) -> Result<(Vec<f64>, f64)> {
        let dims = Self::dims(self.input_dim, &self.hidden, self.num_classes);
        let mut grad = vec![0.0; self.params.len()];
        let b = xs.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(labels) {
            if x.len() != self.input_dim {
                return Err(Error::Shape("fusion feature has the wrong length".into()));
            }
            let acts = self.activations(x);
            let mut p = acts.last().expect("logits").clone();
            softmax_in_place(&mut p);
            loss -= p[y].max(PROB_FLOOR).ln() / b;
            let mut delta = p;
            delta[y] -= 1.0;
            delta.iter_mut().for_each(|d| *d /= b);
            let mut offsets = Vec::new();
            let mut at = 0;
            for w in dims.windows(2) {
                offsets.push(at);
                at += w[0] * w[1] + w[1];
            }
            for l in (0..dims.len() - 1).rev() {
                let (m, n) = (dims[l], dims[l + 1]);
                let off = offsets[l];
                let (gw, gb) = grad[off..off + m * n + n].split_at_mut(m * n);
                affine_grad_params(&acts[l], 1, m, &delta, n, gw, gb);
                if l == 0 {
                    break;
                }
                let mut dx = vec![0.0; m];
                affine_grad_input(&delta, 1, n, &self.params[off..off + m * n], m, &mut dx);
                for (d, a) in dx.iter_mut().zip(&acts[l]) {
                    *d *= 1.0 - a * a;
                }
                delta = dx;
            }
        }
        Ok((grad, loss))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(FUSION_MAGIC);
        buf.extend_from_slice(&self.ensemble_hash.to_le_bytes());
        for v in [self.input_dim, self.num_classes, self.hidden.len()] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &h in &self.hidden {
            buf.extend_from_slice(&(h as u32).to_le_bytes());
        }
        write_f64_block(&mut buf, &self.params);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let r = &mut &bytes[..];
        let magic: [u8; 4] = read_array(r)?;
        if &magic != FUSION_MAGIC {
            return Err(Error::Format(format!("bad fusion magic {magic:?}")));
        }
        let ensemble_hash = read_u64(r)?;
        let input_dim = read_u32(r)? as usize;
        let num_classes = read_u32(r)? as usize;
        let depth = read_u32(r)? as usize;
        if depth > 3 {
            return Err(Error::Format(format!("fusion depth {depth}")));
        }
        let hidden = (0..depth)
            .map(|_| read_u32(r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let params = read_f64_block(r, bytes.len() / 8)?;
        if params.len() != Self::param_count(input_dim, &hidden, num_classes) || !r.is_empty() {
            return Err(Error::Format(
                "fusion parameter block does not match its header".into(),
            ));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite fusion parameters".into()));
        }
        Ok(FusionHead {
            ensemble_hash,
            input_dim,
            num_classes,
            hidden,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Errors unless this head was trained for `ensemble`.
    pub fn check_binding(&self, ensemble: &BoostEnsemble) -> Result<()> {
        if self.input_dim != ensemble.len() * ensemble.num_classes
            || self.num_classes != ensemble.num_classes
        {
            return Err(Error::Shape(format!(
                "head takes {} inputs, ensemble provides {}",
                self.input_dim,
                ensemble.len() * ensemble.num_classes
            )));
        }
        if self.ensemble_hash != ensemble.hash() {
            return Err(Error::ConfigMismatch(
                "fusion head was trained for another ensemble".into(),
            ));
        }
        Ok(())
    }
}

pub fn fusion_predict(
    ensemble: &BoostEnsemble,
    head: &FusionHead,
    example: &EncodedExample,
) -> Result<(usize, Vec<f64>)> {
    head.check_binding(ensemble)?;
    let p = head.probs(&build_feature(ensemble, example)?)?;
    Ok((argmax(&p), p))
}

/// Per-example fusion distributions over a whole dataset.
pub fn fusion_probs(
    ensemble: &BoostEnsemble,
    head: &FusionHead,
    examples: &[EncodedExample],
) -> Result<Vec<Vec<f64>>> {
    head.check_binding(ensemble)?;
    build_features(ensemble, examples)?
        .iter()
        .map(|f| head.probs(f))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FusionTraining {
    pub head: FusionHead,
    pub log: Vec<FusionEpoch>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
}

fn head_accuracy(head: &FusionHead, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
    let mut right = 0;
    for (x, &y) in xs.iter().zip(ys) {
        if argmax(&head.logits(x)?) == y {
            right += 1;
        }
    }
    Ok(right as f64 / ys.len().max(1) as f64)
}

/// Trains a head on precomputed features with unweighted cross-entropy.
/// With a dev split the best-dev epoch is kept (earliest on ties) and
/// training stops after `patience` epochs without improvement.
pub fn train_fusion_on_features(
    train: (&[Vec<f64>], &[usize]),
    dev: Option<(&[Vec<f64>], &[usize])>,
    num_classes: usize,
    ensemble_hash: u64,
    config: &FusionConfig,
    seed: u64,
) -> Result<FusionTraining> {
    config.validate()?;
    let (xs, ys) = train;
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidArgument(
            "fusion needs a non-empty, labelled training set".into(),
        ));
    }
    let input_dim = xs[0].len();
    let width = config.width.unwrap_or(4 * input_dim);
    let mut head = FusionHead::random(
        input_dim,
        vec![width; config.depth],
        num_classes,
        ensemble_hash,
        seed,
    );
    let mut adam = Adam::new(head.num_params(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_F051_0000_0001);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, FusionHead)> = None;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut diverged = false;
        for batch in order.chunks(config.batch_size) {
            let bx: Vec<Vec<f64>> = batch.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<usize> = batch.iter().map(|&i| ys[i]).collect();
            let (g, loss) = head.gradient(&bx, &by)?;
            let mut next = head.params.clone();
            adam.update(&mut next, &g);
            if !loss.is_finite() || next.iter().any(|v| !v.is_finite()) {
                diverged = true;
                break;
            }
            head.params = next;
            total += loss * batch.len() as f64;
        }
        if diverged {
            log::warn!("fusion training diverged in epoch {epoch}; keeping the best head so far");
            break;
        }
        let dev_acc = match dev {
            Some((dx, dy)) => Some(head_accuracy(&head, dx, dy)?),
            None => None,
        };
        log.push(FusionEpoch {
            epoch,
            train_loss: total / xs.len() as f64,
            dev_acc,
        });
        match dev_acc {
            Some(acc) => {
                if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                    best = Some((acc, epoch, head.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.patience {
                        break;
                    }
                }
            }
            None => best = Some((0.0, epoch, head.clone())),
        }
    }
    let (_, best_epoch, head) = best
        .ok_or_else(|| Error::Degenerate("fusion training diverged in its first epoch".into()))?;
    Ok(FusionTraining {
        head,
        log,
        best_epoch,
    })
}

/// Stage two: fits a head on the frozen members' features. The ensemble is
/// only read.
pub fn train_fusion(
    ensemble: &BoostEnsemble,
    train: &[EncodedExample],
    dev: Option<&[EncodedExample]>,
    config: &FusionConfig,
    seed: u64,
) -> Result<FusionTraining> {
    let xs = build_features(ensemble, train)?;
    let ys: Vec<usize> = train.iter().map(|e| e.label_id).collect();
    let dev_data = match dev {
        Some(d) => Some((
            build_features(ensemble, d)?,
            d.iter().map(|e| e.label_id).collect::<Vec<_>>(),
        )),
        None => None,
    };
    train_fusion_on_features(
        (&xs, &ys),
        dev_data.as_ref().map(|(x, y)| (x.as_slice(), y.as_slice())),
        ensemble.num_classes,
        ensemble.hash(),
        config,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_example() {
        let probs = vec![vec![vec![0.6, 0.4]], vec![vec![0.3, 0.7]]];
        let f = features_from_probs(&[1.0, 2.0], &probs);
        assert_eq!(f, vec![vec![0.6, 0.4, 0.6, 1.4]]);
        let plain = features_from_probs(&[1.0, 1.0], &probs);
        assert_eq!(plain, vec![vec![0.6, 0.4, 0.3, 0.7]]);
    }

    #[test]
    fn zero_head_is_uniform() {
        let h = FusionHead::zeros(6, vec![24], 3, 0);
        let p = h.probs(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(argmax(&p), 0);
        assert!(h.probs(&[0.0; 5]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for depth in 0..=3 {
            let h = FusionHead::random(4, vec![5; depth], 3, 0, 7);
            let xs = vec![
                vec![0.3, 0.1, 0.9, -0.2],
                vec![1.0, 0.0, 0.5, 0.5],
                vec![0.2, 0.7, 0.1, 0.0],
            ];
            let ys = [2, 0, 1];
            let (g, _) = h.gradient(&xs, &ys).unwrap();
            let mut probe = h.clone();
            for j in 0..h.params.len() {
                let orig = probe.params[j];
                probe.params[j] = orig + 1e-5;
                let up = probe.gradient(&xs, &ys).unwrap().1;
                probe.params[j] = orig - 1e-5;
                let down = probe.gradient(&xs, &ys).unwrap().1;
                probe.params[j] = orig;
                let num = (up - down) / 2e-5;
                assert!(
                    (num - g[j]).abs() <= 1e-7 * (1.0 + num.abs()),
                    "depth {depth} param {j}: {num} vs {}",
                    g[j]
                );
            }
        }
    }

    #[test]
    fn round_trip_and_determinism() {
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i % 3) as f64, (i % 5) as f64 * 0.1])
            .collect();
        let ys: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let cfg = FusionConfig {
            max_epochs: 5,
            ..Default::default()
        };
        let a = train_fusion_on_features((&xs, &ys), Some((&xs, &ys)), 3, 9, &cfg, 1).unwrap();
        let b = train_fusion_on_features((&xs, &ys), Some((&xs, &ys)), 3, 9, &cfg, 1).unwrap();
        assert_eq!(a.head, b.head);
        assert_eq!(a.head.hidden, vec![8]);
        let back = FusionHead::from_bytes(&a.head.to_bytes()).unwrap();
        assert_eq!(back, a.head);
        assert!(FusionConfig {
            depth: 4,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
