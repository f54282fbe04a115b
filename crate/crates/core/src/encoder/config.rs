use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::textdata::NUM_RESERVED;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Transformer,
    SoftmaxRegression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub learner: LearnerKind,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            learner: LearnerKind::Transformer,
            vocab_size: NUM_RESERVED,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 64,
            max_seq_len: 64,
            dropout_rate: 0.1,
            num_classes: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.vocab_size < NUM_RESERVED {
            return bad(format!(
                "vocab_size {} below reserved block",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.learner == LearnerKind::Transformer {
            for (name, v) in [
                ("d_model", self.d_model),
                ("n_layers", self.n_layers),
                ("n_heads", self.n_heads),
                ("d_ffn", self.d_ffn),
                ("max_seq_len", self.max_seq_len),
            ] {
                if v == 0 {
                    return bad(format!("{name} must be >= 1"));
                }
            }
            if !self.d_model.is_multiple_of(self.n_heads) {
                return bad(format!(
                    "d_model {} not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ));
            }
        }
        Ok(())
    }

    /// Whether two configs produce interchangeable parameter vectors.
    pub fn same_architecture(&self, other: &EncoderConfig) -> bool {
        self.layout() == other.layout()
    }

    pub fn hash(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        u64::from_le_bytes(digest[..8].try_into().expect("digest length"))
    }

    pub fn layout(&self) -> ParamLayout {
        let mut l = ParamLayout::default();
        let (v, d, k) = (self.vocab_size, self.d_model, self.num_classes);
        match self.learner {
            LearnerKind::Transformer => {
                l.push("embed.token", &[v, d]);
                l.push("embed.position", &[self.max_seq_len, d]);
                l.push("embed.segment", &[2, d]);
                l.push("embed.ln.gamma", &[d]);
                l.push("embed.ln.beta", &[d]);
                for i in 0..self.n_layers {
                    let p = format!("layer{i}");
                    for proj in ["query", "key", "value", "attn_out"] {
                        l.push(&format!("{p}.{proj}.weight"), &[d, d]);
                        l.push(&format!("{p}.{proj}.bias"), &[d]);
                    }
                    l.push(&format!("{p}.ln1.gamma"), &[d]);
                    l.push(&format!("{p}.ln1.beta"), &[d]);
                    l.push(&format!("{p}.ffn_in.weight"), &[d, self.d_ffn]);
                    l.push(&format!("{p}.ffn_in.bias"), &[self.d_ffn]);
                    l.push(&format!("{p}.ffn_out.weight"), &[self.d_ffn, d]);
                    l.push(&format!("{p}.ffn_out.bias"), &[d]);
                    l.push(&format!("{p}.ln2.gamma"), &[d]);
                    l.push(&format!("{p}.ln2.beta"), &[d]);
                }
                l.push("pooler.weight", &[d, d]);
                l.push("pooler.bias", &[d]);
                l.push("cls.weight", &[d, k]);
                l.push("cls.bias", &[k]);
            }
            LearnerKind::SoftmaxRegression => {
                l.push("cls.weight", &[v, k]);
                l.push("cls.bias", &[k]);
            }
        }
        l
    }
}

pub const HEAD_PREFIX: &str = "cls.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.numel()
    }

    pub fn is_head(&self) -> bool {
        self.name.starts_with(HEAD_PREFIX)
    }
}

/// Ordered table of named parameter tensors inside a flat vector.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
}

impl ParamLayout {
    fn push(&mut self, name: &str, shape: &[usize]) {
        let offset = self.total();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
    }

    pub fn total(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.numel())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn range(&self, name: &str) -> Range<usize> {
        self.get(name)
            .unwrap_or_else(|| panic!("layout has no parameter {name}"))
            .range()
    }

    /// Ranges of the classification head; everything else is trunk.
    pub fn head_ranges(&self) -> Vec<Range<usize>> {
        self.entries
            .iter()
            .filter(|e| e.is_head())
            .map(ParamEntry::range)
            .collect()
    }

    pub fn head_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.is_head())
            .map(ParamEntry::numel)
            .sum()
    }
}
