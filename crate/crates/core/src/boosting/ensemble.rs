//! `BGE1` ensemble container:
//!
//! ```text
//! magic "BGE1" | u32 K | u32 rounds | u8 sharing (0 privacy, 1 sharing)
//! | u8 has_trunk [u64 len + BGV1 blob]
//! | per round: u32 m | f64 alpha | f64 err | u8 member (0 full, 1 head)
//!   | member (u64 len + BGV1 blob, or f64 block) | u64 n + u32 predictions
//! ```

use std::borrow::Cow;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{SharingMode, VoteKind};
use crate::encoder::checkpoint::{
    io_err, read_array, read_f64, read_f64_block, read_u32, read_u64, write_f64_block,
};
use crate::encoder::math::argmax;
use crate::encoder::{predict_proba, EncoderConfig, ModelSnapshot};
use crate::error::{Error, Result};
use crate::textdata::EncodedExample;

pub const ENSEMBLE_MAGIC: &[u8; 4] = b"BGE1";

#[derive(Debug, Clone, PartialEq)]
pub enum Member {
    Full(ModelSnapshot),
    /// Classification-head parameters applied on the shared trunk.
    Head(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostRound {
    pub m: usize,
    pub alpha: f64,
    pub err: f64,
    pub member: Member,
    pub train_predictions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostEnsemble {
    pub rounds: Vec<BoostRound>,
    pub num_classes: usize,
    pub sharing: SharingMode,
    pub shared_trunk: Option<ModelSnapshot>,
}

/// `score(k) = sum_m alpha_m * p_m[k]`
pub fn soft_vote(alphas: &[f64], probs: &[&[f64]]) -> Vec<f64> {
    let k = probs.first().map_or(0, |p| p.len());
    let mut score = vec![0.0; k];
    for (a, p) in alphas.iter().zip(probs) {
        for (s, v) in score.iter_mut().zip(p.iter()) {
            *s += a * v;
        }
    }
    score
}

/// `score(k) = sum_m alpha_m * 1(argmax p_m = k)`
pub fn discrete_vote(alphas: &[f64], probs: &[&[f64]]) -> Vec<f64> {
    let k = probs.first().map_or(0, |p| p.len());
    let mut score = vec![0.0; k];
    for (a, p) in alphas.iter().zip(probs) {
        score[argmax(p)] += a;
    }
    score
}

impl BoostEnsemble {
    pub fn new(
        rounds: Vec<BoostRound>,
        num_classes: usize,
        sharing: SharingMode,
        shared_trunk: Option<ModelSnapshot>,
    ) -> Result<Self> {
        if rounds.is_empty() {
            return Err(Error::InvalidArgument(
                "an ensemble needs at least one round".into(),
            ));
        }
        for r in &rounds {
            if !(r.alpha.is_finite() && r.err.is_finite()) {
                return Err(Error::NonFinite {
                    location: format!("round {} coefficients", r.m),
                });
            }
            let ok = match (&r.member, sharing) {
                (Member::Full(s), SharingMode::Privacy) => s.config.num_classes == num_classes,
                (Member::Head(h), SharingMode::Sharing) => shared_trunk
                    .as_ref()
                    .is_some_and(|t| t.layout().head_len() == h.len()),
                _ => false,
            };
            if !ok {
                return Err(Error::Shape(format!(
                    "round {} member does not fit a {} ensemble with K={num_classes}",
                    r.m,
                    sharing.name()
                )));
            }
        }
        if sharing == SharingMode::Privacy && shared_trunk.is_some() {
            return Err(Error::InvalidArgument(
                "privacy ensembles carry no shared trunk".into(),
            ));
        }
        if let Some(t) = &shared_trunk {
            if t.config.num_classes != num_classes {
                return Err(Error::Shape(
                    "shared trunk has the wrong class count".into(),
                ));
            }
        }
        Ok(BoostEnsemble {
            rounds,
            num_classes,
            sharing,
            shared_trunk,
        })
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.alpha).collect()
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        match (&self.shared_trunk, &self.rounds[0].member) {
            (Some(t), _) => &t.config,
            (None, Member::Full(s)) => &s.config,
            (None, Member::Head(_)) => unreachable!("validated at construction"),
        }
    }

    /// Total parameters stored across members (the trunk counted once).
    pub fn num_params(&self) -> usize {
        let trunk = self
            .shared_trunk
            .as_ref()
            .map_or(0, |t| t.num_params() - t.layout().head_len());
        trunk
            + self
                .rounds
                .iter()
                .map(|r| match &r.member {
                    Member::Full(s) => s.num_params(),
                    Member::Head(h) => h.len(),
                })
                .sum::<usize>()
    }

    /// The full classifier used at inference for round index `i`.
    pub fn member_snapshot(&self, i: usize) -> Result<Cow<'_, ModelSnapshot>> {
        match &self.rounds[i].member {
            Member::Full(s) => Ok(Cow::Borrowed(s)),
            Member::Head(h) => {
                let trunk = self
                    .shared_trunk
                    .as_ref()
                    .ok_or(Error::MissingContext("shared trunk"))?;
                Ok(Cow::Owned(trunk.with_head(h)?))
            }
        }
    }

    /// Eval-mode distributions indexed `[member][example][class]`.
    pub fn member_probs(&self, examples: &[EncodedExample]) -> Result<Vec<Vec<Vec<f64>>>> {
        (0..self.len())
            .map(|i| {
                self.member_snapshot(i)
                    .and_then(|m| predict_proba(&m, examples))
            })
            .collect()
    }

    pub fn scores_from_probs(&self, probs: &[Vec<Vec<f64>>], kind: VoteKind) -> Vec<Vec<f64>> {
        let alphas = self.alphas();
        let n = probs.first().map_or(0, |p| p.len());
        (0..n)
            .map(|i| {
                let rows: Vec<&[f64]> = probs.iter().map(|p| p[i].as_slice()).collect();
                match kind {
                    VoteKind::Soft => soft_vote(&alphas, &rows),
                    VoteKind::Discrete => discrete_vote(&alphas, &rows),
                }
            })
            .collect()
    }

    pub fn vote_predict(
        &self,
        example: &EncodedExample,
        kind: VoteKind,
    ) -> Result<(usize, Vec<f64>)> {
        let probs = self.member_probs(std::slice::from_ref(example))?;
        let score = self.scores_from_probs(&probs, kind).remove(0);
        Ok((argmax(&score), score))
    }

    pub fn vote_predict_all(
        &self,
        examples: &[EncodedExample],
        kind: VoteKind,
    ) -> Result<Vec<usize>> {
        let probs = self.member_probs(examples)?;
        Ok(self
            .scores_from_probs(&probs, kind)
            .iter()
            .map(|s| argmax(s))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(ENSEMBLE_MAGIC);
        buf.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        buf.extend_from_slice(&(self.rounds.len() as u32).to_le_bytes());
        buf.push(match self.sharing {
            SharingMode::Privacy => 0,
            SharingMode::Sharing => 1,
        });
        match &self.shared_trunk {
            Some(t) => {
                buf.push(1);
                push_blob(&mut buf, &t.to_bytes());
            }
            None => buf.push(0),
        }
        for r in &self.rounds {
            buf.extend_from_slice(&(r.m as u32).to_le_bytes());
            buf.extend_from_slice(&r.alpha.to_le_bytes());
            buf.extend_from_slice(&r.err.to_le_bytes());
            match &r.member {
                Member::Full(s) => {
                    buf.push(0);
                    push_blob(&mut buf, &s.to_bytes());
                }
                Member::Head(h) => {
                    buf.push(1);
                    write_f64_block(&mut buf, h);
                }
            }
            buf.extend_from_slice(&(r.train_predictions.len() as u64).to_le_bytes());
            for &p in &r.train_predictions {
                buf.extend_from_slice(&(p as u32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let r = &mut &bytes[..];
        let magic: [u8; 4] = read_array(r)?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(Error::Format(format!("bad ensemble magic {magic:?}")));
        }
        let k = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let sharing = match read_array::<1, _>(r)?[0] {
            0 => SharingMode::Privacy,
            1 => SharingMode::Sharing,
            x => return Err(Error::Format(format!("unknown sharing tag {x}"))),
        };
        let trunk = match read_array::<1, _>(r)?[0] {
            0 => None,
            1 => Some(ModelSnapshot::from_bytes(&read_blob(r, bytes.len())?)?),
            x => return Err(Error::Format(format!("bad trunk flag {x}"))),
        };
        let mut rounds = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let m = read_u32(r)? as usize;
            let alpha = read_f64(r)?;
            let err = read_f64(r)?;
            let member = match read_array::<1, _>(r)?[0] {
                0 => Member::Full(ModelSnapshot::from_bytes(&read_blob(r, bytes.len())?)?),
                1 => Member::Head(read_f64_block(r, bytes.len() / 8)?),
                x => return Err(Error::Format(format!("unknown member tag {x}"))),
            };
            let n = read_u64(r)? as usize;
            if n > bytes.len() / 4 {
                return Err(Error::Format("prediction block overruns file".into()));
            }
            let train_predictions = (0..n)
                .map(|_| read_u32(r).map(|p| p as usize))
                .collect::<Result<Vec<_>>>()?;
            rounds.push(BoostRound {
                m,
                alpha,
                err,
                member,
                train_predictions,
            });
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after ensemble".into()));
        }
        BoostEnsemble::new(rounds, k, sharing, trunk).map_err(|e| Error::Format(e.to_string()))
    }

    /// First 8 bytes of the SHA-256 of the serialized ensemble.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest length"))
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
}

fn push_blob(buf: &mut Vec<u8>, blob: &[u8]) {
    buf.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    buf.extend_from_slice(blob);
}

fn read_blob<R: Read>(r: &mut R, limit: usize) -> Result<Vec<u8>> {
    let n = read_u64(r)? as usize;
    if n > limit {
        return Err(Error::Format(format!("blob of {n} bytes overruns file")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(b)
}
