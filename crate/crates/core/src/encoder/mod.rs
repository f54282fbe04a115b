//! Base classifiers: a small transformer encoder and a bag-of-words softmax
//! regression, both exposing the same snapshot / forward / gradient surface.

pub(crate) mod checkpoint;
mod config;
mod init;
pub(crate) mod math;
mod mlm;
mod optim;
pub(crate) mod train;
mod transformer;

use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_snapshot, write_snapshot, CHECKPOINT_MAGIC};
pub use config::{EncoderConfig, LearnerKind, ParamEntry, ParamLayout, HEAD_PREFIX};
pub use init::{fresh_head, init_weights, xavier_bound, InitContext, InitStrategy};
pub use mlm::{mask_sequence, pretrain_mlm, MlmCheckpoint, MlmOptions};
pub use optim::Adam;
pub use train::{
    fit, train, weighted_ce_loss, LrSchedule, Objective, StepRecord, TrainOptions, TrainOutcome,
    WeightedLoss, PROB_FLOOR,
};

use crate::error::{Error, Result};
use crate::textdata::{EncodedExample, CLS, PAD, SEP};
use math::softmax_in_place;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Random,
    Pretrained,
    Finetuned,
}

/// Flat parameter vector bound to the config that lays it out.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub config: EncoderConfig,
    pub role: Role,
    pub params: Vec<f64>,
}

impl ModelSnapshot {
    pub fn new(config: EncoderConfig, role: Role, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = config.layout().total();
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "{} parameters for a layout of {expected}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: "snapshot parameters".into(),
            });
        }
        Ok(ModelSnapshot {
            config,
            role,
            params,
        })
    }

    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        let n = config.layout().total();
        Self::new(config, Role::Random, vec![0.0; n])
    }

    pub fn layout(&self) -> ParamLayout {
        self.config.layout()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn head_params(&self) -> Vec<f64> {
        self.layout()
            .head_ranges()
            .into_iter()
            .flat_map(|r| self.params[r].to_vec())
            .collect()
    }

    pub fn set_head_params(&mut self, head: &[f64]) -> Result<()> {
        let layout = self.layout();
        if head.len() != layout.head_len() {
            return Err(Error::Shape(format!(
                "head of {} values, expected {}",
                head.len(),
                layout.head_len()
            )));
        }
        let mut at = 0;
        for r in layout.head_ranges() {
            let n = r.len();
            self.params[r].copy_from_slice(&head[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Copy of this snapshot with another model's head spliced in.
    pub fn with_head(&self, head: &[f64]) -> Result<ModelSnapshot> {
        let mut out = self.clone();
        out.set_head_params(head)?;
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_snapshot(&mut buf, self).expect("write to vec");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_snapshot(&mut &bytes[..])
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) enum Net {
    Transformer(transformer::Index),
    Bow { w: Range<usize>, b: Range<usize> },
}

pub(crate) enum Trace {
    Transformer(transformer::Cache),
    Bow(Vec<(usize, f64)>),
}

impl Net {
    pub(crate) fn new(cfg: &EncoderConfig) -> Self {
        let layout = cfg.layout();
        match cfg.learner {
            LearnerKind::Transformer => Net::Transformer(transformer::Index::new(cfg, &layout)),
            LearnerKind::SoftmaxRegression => Net::Bow {
                w: layout.range("cls.weight"),
                b: layout.range("cls.bias"),
            },
        }
    }

    pub(crate) fn logits(
        &self,
        cfg: &EncoderConfig,
        p: &[f64],
        ex: &EncodedExample,
        rng: Option<&mut Rng>,
    ) -> Result<(Vec<f64>, Trace)> {
        match self {
            Net::Transformer(idx) => {
                let mut cache =
                    transformer::encode(cfg, idx, p, &ex.token_ids, &ex.segment_ids, rng)?;
                let logits = transformer::classify(cfg, idx, p, &mut cache);
                if logits.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        location: "classification head".into(),
                    });
                }
                Ok((logits, Trace::Transformer(cache)))
            }
            Net::Bow { w, b } => {
                let k = cfg.num_classes;
                let feats = bow_features(ex, cfg.vocab_size)?;
                let mut logits = p[b.clone()].to_vec();
                for &(v, x) in &feats {
                    for (l, &wv) in logits
                        .iter_mut()
                        .zip(&p[w.start + v * k..w.start + (v + 1) * k])
                    {
                        *l += x * wv;
                    }
                }
                if logits.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        location: "softmax regression".into(),
                    });
                }
                Ok((logits, Trace::Bow(feats)))
            }
        }
    }

    pub(crate) fn backward(
        &self,
        cfg: &EncoderConfig,
        p: &[f64],
        ex: &EncodedExample,
        trace: &Trace,
        dlogits: &[f64],
        grad: &mut [f64],
    ) {
        match (self, trace) {
            (Net::Transformer(idx), Trace::Transformer(cache)) => {
                let dh = transformer::classify_backward(cfg, idx, p, cache, dlogits, grad);
                transformer::encode_backward(
                    cfg,
                    idx,
                    p,
                    &ex.token_ids,
                    &ex.segment_ids,
                    cache,
                    dh,
                    grad,
                );
            }
            (Net::Bow { w, b }, Trace::Bow(feats)) => {
                let k = cfg.num_classes;
                for (g, &d) in grad[b.clone()].iter_mut().zip(dlogits) {
                    *g += d;
                }
                for &(v, x) in feats {
                    for (g, &d) in grad[w.start + v * k..w.start + (v + 1) * k]
                        .iter_mut()
                        .zip(dlogits)
                    {
                        *g += x * d;
                    }
                }
            }
            _ => unreachable!("trace produced by a different network"),
        }
    }

    pub(crate) fn transformer_index(&self) -> Option<&transformer::Index> {
        match self {
            Net::Transformer(idx) => Some(idx),
            Net::Bow { .. } => None,
        }
    }
}

/// Normalized bag-of-words counts over non-special tokens.
fn bow_features(ex: &EncodedExample, vocab_size: usize) -> Result<Vec<(usize, f64)>> {
    let mut counts: Vec<(usize, f64)> = Vec::new();
    let mut total = 0.0;
    for &t in &ex.token_ids {
        if t == CLS || t == SEP || t == PAD {
            continue;
        }
        let t = t as usize;
        if t >= vocab_size {
            return Err(Error::Shape(format!(
                "token id {t} >= vocab size {vocab_size}"
            )));
        }
        total += 1.0;
        match counts.iter_mut().find(|(v, _)| *v == t) {
            Some(entry) => entry.1 += 1.0,
            None => counts.push((t, 1.0)),
        }
    }
    counts.sort_by_key(|&(v, _)| v);
    for c in counts.iter_mut() {
        c.1 /= total;
    }
    Ok(counts)
}

/// Per-example class distributions. `rng` enables dropout (train mode);
/// `None` is the deterministic eval mode.
pub fn forward(
    model: &ModelSnapshot,
    batch: &[EncodedExample],
    mut rng: Option<&mut Rng>,
) -> Result<Vec<Vec<f64>>> {
    let net = Net::new(&model.config);
    batch
        .iter()
        .map(|ex| {
            let (mut logits, _) =
                net.logits(&model.config, &model.params, ex, rng.as_deref_mut())?;
            softmax_in_place(&mut logits);
            Ok(logits)
        })
        .collect()
}

/// Eval-mode probabilities.
pub fn predict_proba(model: &ModelSnapshot, examples: &[EncodedExample]) -> Result<Vec<Vec<f64>>> {
    forward(model, examples, None)
}

pub fn predict(model: &ModelSnapshot, examples: &[EncodedExample]) -> Result<Vec<usize>> {
    Ok(predict_proba(model, examples)?
        .iter()
        .map(|p| math::argmax(p))
        .collect())
}

/// Gradient of the batch-mean weighted cross-entropy (dropout off), together
/// with the loss value.
pub fn gradients(
    model: &ModelSnapshot,
    batch: &[EncodedExample],
    weights: &[f64],
) -> Result<(Vec<f64>, f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if weights.len() != batch.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} examples",
            weights.len(),
            batch.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "weight {w} is not positive"
        )));
    }
    let net = Net::new(&model.config);
    let mut grad = vec![0.0; model.params.len()];
    let b = batch.len() as f64;
    let mut loss = 0.0;
    for (ex, &w) in batch.iter().zip(weights) {
        let (mut probs, trace) = net.logits(&model.config, &model.params, ex, None)?;
        softmax_in_place(&mut probs);
        loss += w * -probs[ex.label_id].max(PROB_FLOOR).ln() / b;
        let mut dlogits = probs;
        dlogits[ex.label_id] -= 1.0;
        for g in dlogits.iter_mut() {
            *g *= w / b;
        }
        net.backward(
            &model.config,
            &model.params,
            ex,
            &trace,
            &dlogits,
            &mut grad,
        );
    }
    Ok((grad, loss))
}
