//! Compressing a boosted ensemble into one encoder. The student is trained
//! against `lambda * onehot(y) + (1 - lambda) * teacher`, with `lambda`
//! rising linearly from 0 to 1 over the optimizer steps.
//!
//! `BGT1` teacher cache:
//!
//! ```text
//! magic "BGT1" | u64 teacher hash | u64 dataset hash | u32 K | u64 n
//! | n * K f64 rows
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boosting::{BoostEnsemble, VoteKind};
use crate::derive_seed;
use crate::encoder::checkpoint::{read_array, read_f64, read_u32, read_u64};
use crate::encoder::{
    fit, init_weights, EncoderConfig, InitContext, InitStrategy, ModelSnapshot, Objective,
    StepRecord, TrainOptions, PROB_FLOOR,
};
use crate::error::{Error, Result};
use crate::fusion::{fusion_probs, FusionHead};
use crate::textdata::{EncodedExample, LabeledDataset};

pub const TEACHER_MAGIC: &[u8; 4] = b"BGT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub init: InitStrategy,
    /// `T_total` is the step count these options produce on the training set.
    pub train: TrainOptions,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            init: InitStrategy::Pretrained,
            train: TrainOptions::default(),
            seed: 0,
        }
    }
}

/// `step / total`
pub fn annealed_lambda(step: usize, total: usize) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside 0..={total}"
        )));
    }
    Ok(step as f64 / total as f64)
}

/// `lambda * -ln f_s[y] + (1 - lambda) * -sum_k f_t[k] ln f_s[k]`, with log
/// arguments floored at `1e-12`.
pub fn distill_loss(student: &[f64], gold: usize, teacher: &[f64], lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    if student.len() != teacher.len() || gold >= student.len() {
        return Err(Error::Shape(
            "student, teacher and gold label disagree on K".into(),
        ));
    }
    let log = |p: f64| p.max(PROB_FLOOR).ln();
    let gold_ce = -log(student[gold]);
    let soft_ce: f64 = teacher.iter().zip(student).map(|(t, s)| -t * log(*s)).sum();
    Ok(lambda * gold_ce + (1.0 - lambda) * soft_ce)
}

/// Fusion distributions when a head is given, otherwise the soft vote
/// divided by the sum of alphas.
pub fn teacher_targets(
    ensemble: &BoostEnsemble,
    head: Option<&FusionHead>,
    examples: &[EncodedExample],
) -> Result<Vec<Vec<f64>>> {
    match head {
        Some(h) => fusion_probs(ensemble, h, examples),
        None => {
            let total: f64 = ensemble.alphas().iter().sum();
            let probs = ensemble.member_probs(examples)?;
            Ok(ensemble
                .scores_from_probs(&probs, VoteKind::Soft)
                .into_iter()
                .map(|row| row.into_iter().map(|s| s / total).collect())
                .collect())
        }
    }
}

/// Identifies the teacher function: the ensemble alone, or ensemble + head.
pub fn teacher_hash(ensemble: &BoostEnsemble, head: Option<&FusionHead>) -> u64 {
    match head {
        None => ensemble.hash(),
        Some(h) => {
            let mut d = Sha256::new();
            d.update(ensemble.hash().to_le_bytes());
            d.update(h.to_bytes());
            u64::from_le_bytes(d.finalize()[..8].try_into().expect("digest length"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCache {
    pub teacher_hash: u64,
    pub dataset_hash: u64,
    pub rows: Vec<Vec<f64>>,
}

impl TeacherCache {
    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.rows.first().map_or(0, |r| r.len());
        let mut buf = Vec::with_capacity(32 + self.rows.len() * k * 8);
        buf.extend_from_slice(TEACHER_MAGIC);
        buf.extend_from_slice(&self.teacher_hash.to_le_bytes());
        buf.extend_from_slice(&self.dataset_hash.to_le_bytes());
        buf.extend_from_slice(&(k as u32).to_le_bytes());
        buf.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        for v in self.rows.iter().flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let r = &mut &bytes[..];
        let magic: [u8; 4] = read_array(r)?;
        if &magic != TEACHER_MAGIC {
            return Err(Error::Format(format!("bad teacher-cache magic {magic:?}")));
        }
        let teacher_hash = read_u64(r)?;
        let dataset_hash = read_u64(r)?;
        let k = read_u32(r)? as usize;
        let n = read_u64(r)? as usize;
        if n.saturating_mul(k).saturating_mul(8) != r.len() {
            return Err(Error::Format(
                "teacher cache size does not match its header".into(),
            ));
        }
        let rows = (0..n)
            .map(|_| (0..k).map(|_| read_f64(r)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(TeacherCache {
            teacher_hash,
            dataset_hash,
            rows,
        })
    }
}

/// Teacher targets for `data`, replayed from `path` when its keys match and
/// recomputed (and written) otherwise.
pub fn cached_teacher_targets(
    path: &Path,
    ensemble: &BoostEnsemble,
    head: Option<&FusionHead>,
    data: &LabeledDataset,
) -> Result<Vec<Vec<f64>>> {
    let teacher = teacher_hash(ensemble, head);
    let dataset = data.content_hash();
    if let Ok(bytes) = std::fs::read(path) {
        match TeacherCache::from_bytes(&bytes) {
            Ok(c) if c.teacher_hash == teacher && c.dataset_hash == dataset => return Ok(c.rows),
            Ok(_) => log::info!("teacher cache {} is stale; recomputing", path.display()),
            Err(e) => log::warn!("ignoring unreadable teacher cache {}: {e}", path.display()),
        }
    }
    let rows = teacher_targets(ensemble, head, &data.examples)?;
    let cache = TeacherCache {
        teacher_hash: teacher,
        dataset_hash: dataset,
        rows,
    };
    std::fs::write(path, cache.to_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(cache.rows)
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: ModelSnapshot,
    pub log: Vec<StepRecord>,
}

pub fn distill_train(
    teacher: &[Vec<f64>],
    data: &LabeledDataset,
    student: &EncoderConfig,
    pretrained: Option<&ModelSnapshot>,
    config: &DistillConfig,
) -> Result<DistillOutcome> {
    if teacher.len() != data.len() {
        return Err(Error::Shape(format!(
            "{} teacher rows for {} training examples",
            teacher.len(),
            data.len()
        )));
    }
    if let Some(row) = teacher.iter().find(|r| r.len() != data.num_classes()) {
        return Err(Error::Shape(format!("teacher row of length {}", row.len())));
    }
    let init = init_weights(
        config.init,
        &InitContext {
            pretrained,
            ..InitContext::new(student, derive_seed(config.seed, 2))
        },
    )?;
    let objective = Objective::Distill {
        teacher,
        schedule: annealed_lambda,
    };
    let out = fit(
        init,
        data,
        objective,
        &config.train,
        derive_seed(config.seed, 3),
    )?;
    Ok(DistillOutcome {
        student: out.model,
        log: out.log,
    })
}
