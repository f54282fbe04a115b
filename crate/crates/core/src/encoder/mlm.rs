//! Masked-token pre-training for the transformer trunk.

use rand::seq::index;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::math::{affine, affine_grad_input, affine_grad_params, argmax, softmax_in_place};
use super::{init_weights, transformer, Adam, EncoderConfig, InitContext, InitStrategy};
use super::{LearnerKind, ModelSnapshot, Net, Rng, Role};
use crate::error::{Error, Result};
use crate::textdata::{CLS, MASK, SEP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_prob: f64,
}

impl Default for MlmOptions {
    fn default() -> Self {
        MlmOptions {
            steps: 1000,
            batch_size: 32,
            learning_rate: 1e-3,
            mask_prob: 0.15,
        }
    }
}

/// Pre-trained trunk plus the output projection used during pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmCheckpoint {
    pub snapshot: ModelSnapshot,
    /// `[d_model x vocab]` weight followed by `[vocab]` bias.
    pub head: Vec<f64>,
    pub losses: Vec<f64>,
}

pub struct MaskedSequence {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub positions: Vec<usize>,
    pub originals: Vec<u32>,
}

/// Wraps a raw token sequence as `[CLS] seq [SEP]` and replaces
/// `max(1, round(mask_prob * len))` content positions with `MASK`.
/// Sequences shorter than two tokens yield `None`.
pub fn mask_sequence(
    seq: &[u32],
    max_seq_len: usize,
    mask_prob: f64,
    rng: &mut Rng,
) -> Option<MaskedSequence> {
    if seq.len() < 2 || max_seq_len < 4 {
        return None;
    }
    let content = &seq[..seq.len().min(max_seq_len - 2)];
    let mut token_ids = Vec::with_capacity(content.len() + 2);
    token_ids.push(CLS);
    token_ids.extend_from_slice(content);
    token_ids.push(SEP);
    let n_mask = ((content.len() as f64 * mask_prob).round() as usize).clamp(1, content.len());
    let mut positions: Vec<usize> = index::sample(rng, content.len(), n_mask)
        .into_iter()
        .map(|p| p + 1)
        .collect();
    positions.sort_unstable();
    let originals = positions.iter().map(|&p| token_ids[p]).collect();
    for &p in &positions {
        token_ids[p] = MASK;
    }
    Some(MaskedSequence {
        segment_ids: vec![0; token_ids.len()],
        token_ids,
        positions,
        originals,
    })
}

fn head_logits(cfg: &EncoderConfig, head: &[f64], hidden_row: &[f64]) -> Vec<f64> {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    affine(hidden_row, 1, d, &head[..d * v], &head[d * v..], v)
}

pub fn pretrain_mlm(
    corpus: &[Vec<u32>],
    config: &EncoderConfig,
    opts: &MlmOptions,
    seed: u64,
) -> Result<MlmCheckpoint> {
    if config.learner != LearnerKind::Transformer {
        return Err(Error::Config(
            "MLM pre-training needs the transformer learner".into(),
        ));
    }
    if let Some(t) = corpus
        .iter()
        .flatten()
        .find(|&&t| t as usize >= config.vocab_size)
    {
        return Err(Error::InvalidArgument(format!(
            "corpus token {t} outside vocabulary"
        )));
    }
    let mut snapshot = init_weights(InitStrategy::Random, &InitContext::new(config, seed))?;
    snapshot.role = Role::Pretrained;
    let (d, v) = (config.d_model, config.vocab_size);
    let mut rng = Rng::seed_from_u64(seed.wrapping_add(1));
    let bound = super::xavier_bound(d, v);
    let mut head: Vec<f64> = (0..d * v)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    head.extend(std::iter::repeat_n(0.0, v));

    let eligible: Vec<&Vec<u32>> = corpus.iter().filter(|s| s.len() >= 2).collect();
    if opts.steps > 0 && eligible.is_empty() {
        return Err(Error::InvalidArgument(
            "no corpus sequence has 2 or more tokens".into(),
        ));
    }

    let net = Net::new(config);
    let idx = net.transformer_index().expect("transformer learner");
    let mut adam_trunk = Adam::new(snapshot.params.len(), opts.learning_rate);
    let mut adam_head = Adam::new(head.len(), opts.learning_rate);
    let mut grad = vec![0.0; snapshot.params.len()];
    let mut grad_head = vec![0.0; head.len()];
    let mut dropout_rng = Rng::seed_from_u64(seed ^ 0xA076_1D64_78BD_642F);
    let mut losses = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let batch: Vec<MaskedSequence> = (0..opts.batch_size.max(1))
            .filter_map(|_| {
                let s = eligible[rng.random_range(0..eligible.len())];
                mask_sequence(s, config.max_seq_len, opts.mask_prob, &mut rng)
            })
            .collect();
        let n_masked: usize = batch.iter().map(|m| m.positions.len()).sum();
        grad.fill(0.0);
        grad_head.fill(0.0);
        let mut loss = 0.0;
        for m in &batch {
            let cache = transformer::encode(
                config,
                idx,
                &snapshot.params,
                &m.token_ids,
                &m.segment_ids,
                Some(&mut dropout_rng),
            )?;
            let mut dh = vec![0.0; m.token_ids.len() * d];
            for (&pos, &orig) in m.positions.iter().zip(&m.originals) {
                let row = &cache.hidden[pos * d..(pos + 1) * d];
                let mut p = head_logits(config, &head, row);
                softmax_in_place(&mut p);
                loss -= p[orig as usize].max(super::PROB_FLOOR).ln() / n_masked as f64;
                p[orig as usize] -= 1.0;
                for g in p.iter_mut() {
                    *g /= n_masked as f64;
                }
                let (gw, gb) = grad_head.split_at_mut(d * v);
                affine_grad_params(row, 1, d, &p, v, gw, gb);
                affine_grad_input(&p, 1, v, &head[..d * v], d, &mut dh[pos * d..(pos + 1) * d]);
            }
            transformer::encode_backward(
                config,
                idx,
                &snapshot.params,
                &m.token_ids,
                &m.segment_ids,
                &cache,
                dh,
                &mut grad,
            );
        }
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                last_finite: Box::new(snapshot),
            });
        }
        adam_trunk.update(&mut snapshot.params, &grad);
        adam_head.update(&mut head, &grad_head);
        losses.push(loss);
    }
    Ok(MlmCheckpoint {
        snapshot,
        head,
        losses,
    })
}

impl MlmCheckpoint {
    /// Top-1 accuracy of recovering masked tokens, eval mode.
    pub fn masked_accuracy(&self, corpus: &[Vec<u32>], mask_prob: f64, seed: u64) -> Result<f64> {
        let cfg = &self.snapshot.config;
        let net = Net::new(cfg);
        let idx = net
            .transformer_index()
            .ok_or_else(|| Error::Config("not a transformer".into()))?;
        let mut rng = Rng::seed_from_u64(seed);
        let (mut hit, mut total) = (0usize, 0usize);
        for seq in corpus {
            let Some(m) = mask_sequence(seq, cfg.max_seq_len, mask_prob, &mut rng) else {
                continue;
            };
            let cache = transformer::encode::<Rng>(
                cfg,
                idx,
                &self.snapshot.params,
                &m.token_ids,
                &m.segment_ids,
                None,
            )?;
            for (&pos, &orig) in m.positions.iter().zip(&m.originals) {
                let d = cfg.d_model;
                let logits = head_logits(cfg, &self.head, &cache.hidden[pos * d..(pos + 1) * d]);
                hit += usize::from(argmax(&logits) == orig as usize);
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::InvalidArgument("nothing to evaluate".into()));
        }
        Ok(hit as f64 / total as f64)
    }
}
