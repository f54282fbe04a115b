//! Bundled synthetic 3-class text task.
//!
//! Each class owns a keyword list drawn with Zipf frequencies, so a few
//! keywords are common and most are rare. A text carries one or two
//! keywords of its class among filler words, sometimes a keyword of another
//! class (outvoted), and sometimes `not` followed by a keyword of another
//! class, which does not count. A fraction of labels is then flipped.
//! The unlabelled pre-training corpus holds single-topic documents: several
//! keywords of one class among fillers, with the same word frequencies.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::textdata::RawExample;

pub const NEGATION: &str = "not";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub keywords_per_class: usize,
    pub fillers: usize,
    /// Zipf exponent for keyword and filler frequencies.
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of an outvoted keyword from another class.
    pub distractor_rate: f64,
    /// Probability of a negated keyword from another class.
    pub negation_rate: f64,
    /// Probability that the label is replaced by a different class.
    pub label_noise: f64,
    /// Keywords per corpus document, all from the document's class.
    pub corpus_min_keywords: usize,
    pub corpus_max_keywords: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 3,
            keywords_per_class: 40,
            fillers: 120,
            zipf_exponent: 1.1,
            min_len: 6,
            max_len: 14,
            distractor_rate: 0.3,
            negation_rate: 0.35,
            label_noise: 0.02,
            corpus_min_keywords: 3,
            corpus_max_keywords: 5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |v: f64| (0.0..=1.0).contains(&v);
        if self.num_classes < 2 || self.keywords_per_class == 0 || self.fillers == 0 {
            return Err(Error::Config(
                "synthetic task needs K >= 2, keywords and fillers".into(),
            ));
        }
        if self.min_len < 5 || self.max_len < self.min_len {
            return Err(Error::Config(
                "synthetic lengths need 5 <= min_len <= max_len".into(),
            ));
        }
        if !(rate(self.distractor_rate) && rate(self.negation_rate) && rate(self.label_noise)) {
            return Err(Error::Config("synthetic rates must lie in [0, 1]".into()));
        }
        if self.corpus_min_keywords == 0
            || self.corpus_max_keywords < self.corpus_min_keywords
            || self.corpus_max_keywords > self.max_len
        {
            return Err(Error::Config(
                "corpus keywords need 1 <= min <= max <= max_len".into(),
            ));
        }
        if !(self.zipf_exponent >= 0.0) {
            return Err(Error::Config("zipf exponent must be non-negative".into()));
        }
        Ok(())
    }

    pub fn keyword(class: usize, rank: usize) -> String {
        format!("c{class}w{rank}")
    }

    pub fn class_name(class: usize) -> String {
        format!("class{class}")
    }
}

struct Sampler<'a> {
    cfg: &'a SynthConfig,
    keywords: WeightedIndex<f64>,
    fillers: WeightedIndex<f64>,
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| (r as f64).powf(-s))).expect("positive weights")
}

impl<'a> Sampler<'a> {
    fn new(cfg: &'a SynthConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sampler {
            cfg,
            keywords: zipf(cfg.keywords_per_class, cfg.zipf_exponent),
            fillers: zipf(cfg.fillers, cfg.zipf_exponent),
        })
    }

    fn other_class(&self, y: usize, rng: &mut ChaCha8Rng) -> usize {
        let c = rng.random_range(0..self.cfg.num_classes - 1);
        if c >= y {
            c + 1
        } else {
            c
        }
    }

    /// Text and its noise-free label.
    fn text(&self, rng: &mut ChaCha8Rng) -> (String, usize) {
        let cfg = self.cfg;
        let y = rng.random_range(0..cfg.num_classes);
        let distractor = rng.random_bool(cfg.distractor_rate);
        let negated = rng.random_bool(cfg.negation_rate);
        let own = if distractor || rng.random_bool(0.5) {
            2
        } else {
            1
        };

        // Units keep "not" attached to the keyword it negates.
        let mut units: Vec<Vec<String>> = Vec::new();
        for _ in 0..own {
            units.push(vec![SynthConfig::keyword(y, self.keywords.sample(rng))]);
        }
        if distractor {
            let c = self.other_class(y, rng);
            units.push(vec![SynthConfig::keyword(c, self.keywords.sample(rng))]);
        }
        if negated {
            let c = self.other_class(y, rng);
            units.push(vec![
                NEGATION.to_string(),
                SynthConfig::keyword(c, self.keywords.sample(rng)),
            ]);
        }
        let used: usize = units.iter().map(|u| u.len()).sum();
        let len = rng.random_range(cfg.min_len..=cfg.max_len).max(used);
        for _ in used..len {
            units.push(vec![format!("f{}", self.fillers.sample(rng))]);
        }
        units.shuffle(rng);
        (units.concat().join(" "), y)
    }

    /// Single-topic unlabelled document: several keywords of one class.
    fn document(&self, rng: &mut ChaCha8Rng) -> String {
        let cfg = self.cfg;
        let y = rng.random_range(0..cfg.num_classes);
        let n = rng.random_range(cfg.corpus_min_keywords..=cfg.corpus_max_keywords);
        let len = rng.random_range(cfg.min_len..=cfg.max_len).max(n);
        let mut words: Vec<String> = (0..n)
            .map(|_| SynthConfig::keyword(y, self.keywords.sample(rng)))
            .collect();
        words.extend((n..len).map(|_| format!("f{}", self.fillers.sample(rng))));
        words.shuffle(rng);
        words.join(" ")
    }
}

pub fn generate(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<RawExample>> {
    let sampler = Sampler::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let (text, mut y) = sampler.text(&mut rng);
            if rng.random_bool(cfg.label_noise) {
                y = sampler.other_class(y, &mut rng);
            }
            RawExample {
                label: SynthConfig::class_name(y),
                text_a: text,
                text_b: None,
            }
        })
        .collect())
}

pub fn generate_corpus(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<String>> {
    let sampler = Sampler::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| sampler.document(&mut rng)).collect())
}

/// Label implied by a text under the generating rule (before noise): the
/// class with the most non-negated keywords.
pub fn rule_label(text: &str, num_classes: usize) -> Option<usize> {
    let mut counts = vec![0usize; num_classes];
    let mut after_not = false;
    for tok in text.split_whitespace() {
        if tok == NEGATION {
            after_not = true;
            continue;
        }
        if let Some(rest) = tok.strip_prefix('c') {
            if let Some((c, _)) = rest.split_once('w') {
                if let Ok(c) = c.parse::<usize>() {
                    if !after_not && c < num_classes {
                        counts[c] += 1;
                    }
                }
            }
        }
        after_not = false;
    }
    let max = *counts.iter().max()?;
    let winners: Vec<usize> = (0..num_classes).filter(|&c| counts[c] == max).collect();
    (max > 0 && winners.len() == 1).then(|| winners[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSizes {
    pub train: usize,
    pub dev: usize,
    pub corpus: usize,
}

impl Default for TaskSizes {
    fn default() -> Self {
        TaskSizes {
            train: 2000,
            dev: 2000,
            corpus: 8000,
        }
    }
}

fn tsv(examples: &[RawExample]) -> String {
    let mut s = String::new();
    for e in examples {
        let _ = writeln!(s, "{}\t{}", e.label, e.text_a);
    }
    s
}

/// Writes `train.tsv`, `dev.tsv` and `corpus.txt` into `dir`.
pub fn write_task(dir: &Path, cfg: &SynthConfig, sizes: TaskSizes, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train = generate(cfg, sizes.train, derive_seed(seed, 100))?;
    let dev = generate(cfg, sizes.dev, derive_seed(seed, 101))?;
    let corpus = generate_corpus(cfg, sizes.corpus, derive_seed(seed, 102))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("train.tsv", tsv(&train))?;
    write("dev.tsv", tsv(&dev))?;
    write("corpus.txt", corpus.join("\n") + "\n")
}
