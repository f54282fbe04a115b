//! Dataset ingestion: TSV loading, whitespace tokenization, vocabulary
//! construction, encoding into `[CLS] a [SEP] (b [SEP])` layout and
//! stratified sub-sampling.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_RESERVED: usize = 5;

const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawExample {
    pub label: String,
    pub text_a: String,
    pub text_b: Option<String>,
}

/// Expected column layout of a TSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Columns {
    /// `label \t text`
    Single,
    /// `label \t text_a \t text_b`
    Pair,
    /// Either of the above, decided per line.
    Any,
}

pub fn load_tsv(path: impl AsRef<Path>, columns: Columns) -> Result<Vec<RawExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, message: String| Error::MalformedLine {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let ok = match columns {
            Columns::Single => fields.len() == 2,
            Columns::Pair => fields.len() == 3,
            Columns::Any => fields.len() == 2 || fields.len() == 3,
        };
        if !ok {
            return Err(malformed(
                lineno,
                format!(
                    "expected {columns:?} layout, found {} field(s)",
                    fields.len()
                ),
            ));
        }
        let label = fields[0].trim();
        if label.is_empty() {
            return Err(malformed(lineno, "empty label".into()));
        }
        if fields[1].trim().is_empty() {
            return Err(malformed(lineno, "empty text".into()));
        }
        out.push(RawExample {
            label: label.to_string(),
            text_a: fields[1].to_string(),
            text_b: fields.get(2).map(|s| s.to_string()),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Ok(out)
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn reserved_only() -> Self {
        let id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Maps already-lowercased tokens to ids, unknown tokens to `UNK`.
    pub fn ids<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vec<u32> {
        tokens
            .into_iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().filter_map(|&i| self.token(i)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        for (id, tok) in self.id_to_token.iter().enumerate() {
            writeln!(buf, "{tok}\t{id}").expect("write to vec");
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let malformed = |message: &str| Error::MalformedLine {
                path: path.to_path_buf(),
                line: idx + 1,
                message: message.to_string(),
            };
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| malformed("expected `token\\tid`"))?;
            let id: u32 = id.parse().map_err(|_| malformed("bad id"))?;
            pairs.push((id, tok.to_string()));
        }
        pairs.sort();
        let mut vocab = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for (expected, (id, tok)) in pairs.into_iter().enumerate() {
            if id as usize != expected {
                return Err(Error::Format(format!(
                    "vocabulary ids not dense at {expected}"
                )));
            }
            if expected < NUM_RESERVED && tok != RESERVED_TOKENS[expected] {
                return Err(Error::Format(format!("reserved id {expected} is {tok:?}")));
            }
            if vocab.token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Format(format!("duplicate token {tok:?}")));
            }
            vocab.id_to_token.push(tok);
        }
        if vocab.len() < NUM_RESERVED {
            return Err(Error::Format("vocabulary lacks reserved tokens".into()));
        }
        Ok(vocab)
    }
}

/// Builds a vocabulary from raw texts. Tokens seen at least `min_count`
/// times get ids after the reserved block, most frequent first, ties broken
/// lexicographically.
pub fn build_vocab_from_texts<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    min_count: usize,
) -> Vocabulary {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in texts {
        for tok in tokenize(text) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(tok, c)| *c >= min_count.max(1) && !RESERVED_TOKENS.contains(&tok.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut vocab = Vocabulary::reserved_only();
    for (tok, _) in kept {
        let id = vocab.id_to_token.len() as u32;
        vocab.token_to_id.insert(tok.clone(), id);
        vocab.id_to_token.push(tok);
    }
    vocab
}

pub fn build_vocab(examples: &[RawExample], min_count: usize) -> Vocabulary {
    build_vocab_from_texts(
        examples
            .iter()
            .flat_map(|e| std::iter::once(e.text_a.as_str()).chain(e.text_b.as_deref())),
        min_count,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub label_id: usize,
    pub weight: f64,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Label string to class id, in sorted label order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn new(mut names: Vec<String>) -> Result<Self> {
        names.sort();
        names.dedup();
        if names.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, found {}",
                names.len()
            )));
        }
        Ok(LabelMap { names })
    }

    pub fn from_examples(examples: &[RawExample]) -> Result<Self> {
        Self::new(examples.iter().map(|e| e.label.clone()).collect())
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(label)).ok()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

pub fn encode(
    example: &RawExample,
    vocab: &Vocabulary,
    labels: &LabelMap,
    max_seq_len: usize,
) -> Result<EncodedExample> {
    let label_id = labels
        .id(&example.label)
        .ok_or_else(|| Error::UnknownLabel(example.label.clone()))?;
    let tokens_a = tokenize(&example.text_a);
    let mut ids_a = vocab.ids(tokens_a.iter().map(String::as_str));
    let mut ids_b = example
        .text_b
        .as_ref()
        .map(|b| vocab.ids(tokenize(b).iter().map(String::as_str)));

    let specials = 2 + usize::from(ids_b.is_some());
    if max_seq_len < specials {
        return Err(Error::InvalidArgument(format!(
            "max_seq_len {max_seq_len} cannot hold {specials} special tokens"
        )));
    }
    let budget = max_seq_len - specials;
    let len_b = ids_b.as_ref().map_or(0, Vec::len);
    if ids_a.len() + len_b > budget {
        let overflow = ids_a.len() + len_b - budget;
        if let Some(b) = ids_b.as_mut() {
            let cut = overflow.min(b.len());
            b.truncate(b.len() - cut);
        }
        let len_b = ids_b.as_ref().map_or(0, Vec::len);
        ids_a.truncate(budget - len_b);
    }

    let mut token_ids = Vec::with_capacity(max_seq_len);
    token_ids.push(CLS);
    token_ids.extend_from_slice(&ids_a);
    token_ids.push(SEP);
    let first_segment = token_ids.len();
    if let Some(b) = ids_b {
        token_ids.extend_from_slice(&b);
        token_ids.push(SEP);
    }
    let mut segment_ids = vec![0u8; token_ids.len()];
    segment_ids[first_segment..].fill(1);

    Ok(EncodedExample {
        token_ids,
        segment_ids,
        label_id,
        weight: 1.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub examples: Vec<EncodedExample>,
    pub label_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(examples: Vec<EncodedExample>, label_names: Vec<String>) -> Result<Self> {
        if label_names.len() < 2 {
            return Err(Error::InvalidArgument("a dataset needs K >= 2".into()));
        }
        if let Some(e) = examples.iter().find(|e| e.label_id >= label_names.len()) {
            return Err(Error::InvalidArgument(format!(
                "label id {} out of range for K={}",
                e.label_id,
                label_names.len()
            )));
        }
        Ok(LabeledDataset {
            examples,
            label_names,
        })
    }

    pub fn encode_all(
        raw: &[RawExample],
        vocab: &Vocabulary,
        labels: &LabelMap,
        max_seq_len: usize,
    ) -> Result<Self> {
        let examples = raw
            .iter()
            .map(|r| encode(r, vocab, labels, max_seq_len))
            .collect::<Result<Vec<_>>>()?;
        Self::new(examples, labels.names().to_vec())
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label_id).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for e in &self.examples {
            counts[e.label_id] += 1;
        }
        counts
    }

    /// Training splits must contain every class.
    pub fn require_every_class(&self) -> Result<()> {
        match self.class_counts().iter().position(|&c| c == 0) {
            Some(k) => Err(Error::EmptyClass(self.label_names[k].clone())),
            None => Ok(()),
        }
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.num_classes() as u64).to_le_bytes());
        for e in &self.examples {
            h.update((e.token_ids.len() as u64).to_le_bytes());
            for &t in &e.token_ids {
                h.update(t.to_le_bytes());
            }
            h.update(&e.segment_ids);
            h.update((e.label_id as u64).to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest length"))
    }
}

/// Stratified uniform sample keeping `round(n_c * fraction)` examples of each
/// class `c`, in original order.
pub fn subsample(dataset: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, e) in dataset.examples.iter().enumerate() {
        by_class[e.label_id].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (k, mut idx) in by_class.into_iter().enumerate() {
        let take = (idx.len() as f64 * fraction).round() as usize;
        if take == 0 {
            return Err(Error::EmptyClass(dataset.label_names[k].clone()));
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..take]);
    }
    keep.sort_unstable();
    Ok(LabeledDataset {
        examples: keep.iter().map(|&i| dataset.examples[i].clone()).collect(),
        label_names: dataset.label_names.clone(),
    })
}
