//! Run configuration, task preparation and the end-to-end pipelines behind
//! the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{bag_train, geometric_multipliers, BagConfig, BagEnsemble};
use crate::boosting::{
    boost_train, single_baseline, BoostConfig, BoostContext, BoostEnsemble, BoostTraining,
    RoundLog, SharingMode, VoteKind,
};
use crate::derive_seed;
use crate::distill::{distill_train, DistillConfig, DistillOutcome};
use crate::encoder::{
    predict, pretrain_mlm, EncoderConfig, InitStrategy, LearnerKind, MlmOptions, ModelSnapshot,
    TrainOptions,
};
use crate::error::{Error, Result};
use crate::fusion::{fusion_probs, train_fusion, FusionConfig, FusionHead, FusionTraining};
use crate::textdata::{
    build_vocab_from_texts, load_tsv, subsample, tokenize, Columns, LabelMap, LabeledDataset,
    RawExample, Vocabulary,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub dev: PathBuf,
    /// Unlabelled text, one sequence per line, for masked-token pre-training.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default = "one")]
    pub min_count: usize,
}

fn one() -> usize {
    1
}

/// Encoder architecture; the vocabulary size and class count come from the
/// data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub learner: LearnerKind,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        ModelConfig {
            learner: e.learner,
            d_model: e.d_model,
            n_layers: e.n_layers,
            n_heads: e.n_heads,
            d_ffn: e.d_ffn,
            max_seq_len: e.max_seq_len,
            dropout_rate: e.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostSection {
    pub rounds: usize,
    pub init: InitStrategy,
    pub sharing: SharingMode,
}

impl Default for BoostSection {
    fn default() -> Self {
        let b = BoostConfig::default();
        BoostSection {
            rounds: b.rounds,
            init: b.init,
            sharing: b.sharing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub init: InitStrategy,
    /// Student epochs; defaults to the base training epochs.
    pub epochs: Option<usize>,
    /// Distil from the fusion head (true) or the normalized soft vote.
    pub from_fusion: bool,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            init: InitStrategy::Pretrained,
            epochs: None,
            from_fusion: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaggingSection {
    /// Multipliers on the base learning rate; defaults to one per boosting
    /// round, spread geometrically over `[0.5, 2]`.
    pub lr_multipliers: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub seed: u64,
    #[serde(default)]
    pub vote: VoteKind,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub boost: BoostSection,
    #[serde(default)]
    pub train: TrainOptions,
    #[serde(default)]
    pub pretrain: MlmOptions,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub bagging: BaggingSection,
}

impl RunConfig {
    /// Parses TOML, applying `key.path=value` overrides first and resolving
    /// data paths against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("{e}")))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.data.train);
        resolve(&mut cfg.data.dev);
        if let Some(c) = cfg.data.corpus.as_mut() {
            resolve(c);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 8 bytes of the SHA-256 of the canonical JSON form, as hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let d = Sha256::digest(json);
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn needs_pretraining(&self) -> bool {
        self.model.learner == LearnerKind::Transformer
            && (self.boost.init != InitStrategy::Random
                || self.distill.init != InitStrategy::Random)
    }

    pub fn validate(&self) -> Result<()> {
        let exists = |p: &Path, what: &str| {
            if p.is_file() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{what} file {} does not exist",
                    p.display()
                )))
            }
        };
        exists(&self.data.train, "train")?;
        exists(&self.data.dev, "dev")?;
        if let Some(c) = &self.data.corpus {
            exists(c, "corpus")?;
        }
        if self.boost.rounds == 0 {
            return Err(Error::Config("boost.rounds must be >= 1".into()));
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        self.train.validate()?;
        if self.model.learner == LearnerKind::SoftmaxRegression
            && (self.boost.init != InitStrategy::Random
                || self.distill.init != InitStrategy::Random)
        {
            return Err(Error::Config(
                "softmax regression supports only random initialization".into(),
            ));
        }
        if self.needs_pretraining() && self.data.corpus.is_none() {
            return Err(Error::Config(
                "non-random initialization needs data.corpus for pre-training".into(),
            ));
        }
        if let Some(m) = &self.bagging.lr_multipliers {
            if m.len() < 2 || m.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config(
                    "bagging needs two or more positive multipliers".into(),
                ));
            }
        }
        self.fusion.validate()?;
        self.encoder_config(NUM_PLACEHOLDER_VOCAB, 2).validate()
    }

    pub fn encoder_config(&self, vocab_size: usize, num_classes: usize) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            learner: m.learner,
            vocab_size,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ffn: m.d_ffn,
            max_seq_len: m.max_seq_len,
            dropout_rate: m.dropout_rate,
            num_classes,
        }
    }

    pub fn boost_config(&self) -> BoostConfig {
        BoostConfig {
            rounds: self.boost.rounds,
            init: self.boost.init,
            sharing: self.boost.sharing,
            train: self.train.clone(),
            seed: self.seed,
        }
    }

    pub fn bag_config(&self, members: usize) -> BagConfig {
        BagConfig {
            lr_multipliers: self
                .bagging
                .lr_multipliers
                .clone()
                .unwrap_or_else(|| geometric_multipliers(members.max(2))),
            init: match self.boost.init {
                InitStrategy::Random => InitStrategy::Random,
                _ => InitStrategy::Pretrained,
            },
            train: self.train.clone(),
            seed: self.seed,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            init: self.distill.init,
            train: TrainOptions {
                epochs: self.distill.epochs.unwrap_or(self.train.epochs),
                ..self.train.clone()
            },
            seed: self.seed,
        }
    }
}

const NUM_PLACEHOLDER_VOCAB: usize = crate::textdata::NUM_RESERVED + 1;

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a non-table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Encoded splits plus everything needed to rebuild them.
#[derive(Debug, Clone)]
pub struct Task {
    pub vocab: Vocabulary,
    pub labels: LabelMap,
    pub train: LabeledDataset,
    pub dev: LabeledDataset,
    pub corpus: Vec<Vec<u32>>,
    pub encoder: EncoderConfig,
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(String::from)
        .collect())
}

impl Task {
    /// Builds the vocabulary from the training texts and the corpus.
    pub fn load(cfg: &RunConfig) -> Result<Task> {
        let train_raw = load_tsv(&cfg.data.train, Columns::Any)?;
        let corpus_text = match &cfg.data.corpus {
            Some(p) => read_corpus(p)?,
            None => Vec::new(),
        };
        let texts = train_raw
            .iter()
            .flat_map(|e| std::iter::once(e.text_a.as_str()).chain(e.text_b.as_deref()))
            .chain(corpus_text.iter().map(String::as_str));
        let vocab = build_vocab_from_texts(texts, cfg.data.min_count);
        let labels = LabelMap::from_examples(&train_raw)?;
        Self::assemble(cfg, vocab, labels, train_raw, &corpus_text)
    }

    /// Re-encodes the splits with a saved vocabulary and label map.
    pub fn load_with(cfg: &RunConfig, vocab: Vocabulary, labels: LabelMap) -> Result<Task> {
        let train_raw = load_tsv(&cfg.data.train, Columns::Any)?;
        let corpus_text = match &cfg.data.corpus {
            Some(p) => read_corpus(p)?,
            None => Vec::new(),
        };
        Self::assemble(cfg, vocab, labels, train_raw, &corpus_text)
    }

    fn assemble(
        cfg: &RunConfig,
        vocab: Vocabulary,
        labels: LabelMap,
        train_raw: Vec<RawExample>,
        corpus_text: &[String],
    ) -> Result<Task> {
        let dev_raw = load_tsv(&cfg.data.dev, Columns::Any)?;
        let train = LabeledDataset::encode_all(&train_raw, &vocab, &labels, cfg.model.max_seq_len)?;
        train.require_every_class()?;
        let dev = LabeledDataset::encode_all(&dev_raw, &vocab, &labels, cfg.model.max_seq_len)?;
        let corpus = corpus_text
            .iter()
            .map(|t| vocab.ids(tokenize(t).iter().map(String::as_str)))
            .collect();
        let encoder = cfg.encoder_config(vocab.len(), labels.len());
        Ok(Task {
            vocab,
            labels,
            train,
            dev,
            corpus,
            encoder,
        })
    }
}

pub fn accuracy_pct(pred: &[usize], gold: &[usize]) -> f64 {
    100.0 * crate::boosting::accuracy(pred, gold)
}

/// Fixed experimental setup: config, encoded task and the pre-trained
/// checkpoint when one is needed.
pub struct Experiment<'a> {
    pub cfg: &'a RunConfig,
    pub task: &'a Task,
    pub pretrained: Option<ModelSnapshot>,
}

impl<'a> Experiment<'a> {
    pub fn new(cfg: &'a RunConfig, task: &'a Task) -> Result<Self> {
        let pretrained = if cfg.needs_pretraining() {
            let ckpt = pretrain_mlm(
                &task.corpus,
                &task.encoder,
                &cfg.pretrain,
                derive_seed(cfg.seed, 50),
            )?;
            Some(ckpt.snapshot)
        } else {
            None
        };
        Ok(Experiment {
            cfg,
            task,
            pretrained,
        })
    }

    pub fn with_pretrained(
        cfg: &'a RunConfig,
        task: &'a Task,
        pretrained: Option<ModelSnapshot>,
    ) -> Self {
        Experiment {
            cfg,
            task,
            pretrained,
        }
    }

    pub fn context(&self) -> BoostContext<'_> {
        BoostContext {
            encoder: &self.task.encoder,
            pretrained: self.pretrained.as_ref(),
            dev: Some(&self.task.dev),
        }
    }

    pub fn dev_accuracy(&self, model: &ModelSnapshot) -> Result<f64> {
        Ok(accuracy_pct(
            &predict(model, &self.task.dev.examples)?,
            &self.task.dev.labels(),
        ))
    }

    pub fn single(&self, train: &LabeledDataset, boost: &BoostConfig) -> Result<ModelSnapshot> {
        single_baseline(train, boost, self.context())
    }

    pub fn boost(&self, train: &LabeledDataset, boost: &BoostConfig) -> Result<BoostTraining> {
        boost_train(train, boost, self.context())
    }

    pub fn fusion(
        &self,
        ensemble: &BoostEnsemble,
        train: &LabeledDataset,
    ) -> Result<FusionTraining> {
        train_fusion(
            ensemble,
            &train.examples,
            Some(&self.task.dev.examples),
            &self.cfg.fusion,
            derive_seed(self.cfg.seed, 60),
        )
    }

    pub fn vote_accuracy(&self, ensemble: &BoostEnsemble, kind: VoteKind) -> Result<f64> {
        let pred = ensemble.vote_predict_all(&self.task.dev.examples, kind)?;
        Ok(accuracy_pct(&pred, &self.task.dev.labels()))
    }

    pub fn fusion_accuracy(&self, ensemble: &BoostEnsemble, head: &FusionHead) -> Result<f64> {
        let probs = fusion_probs(ensemble, head, &self.task.dev.examples)?;
        let pred: Vec<usize> = probs
            .iter()
            .map(|p| crate::encoder::math::argmax(p))
            .collect();
        Ok(accuracy_pct(&pred, &self.task.dev.labels()))
    }

    pub fn bag(&self, members: usize) -> Result<BagEnsemble> {
        bag_train(
            &self.task.train,
            &self.task.encoder,
            self.pretrained.as_ref(),
            &self.cfg.bag_config(members),
        )
    }

    pub fn bag_accuracy(&self, bag: &BagEnsemble) -> Result<f64> {
        Ok(accuracy_pct(
            &bag.predict_all(&self.task.dev.examples)?,
            &self.task.dev.labels(),
        ))
    }

    pub fn distill(&self, teacher: &[Vec<f64>]) -> Result<DistillOutcome> {
        distill_train(
            teacher,
            &self.task.train,
            &self.task.encoder,
            self.pretrained.as_ref(),
            &self.cfg.distill_config(),
        )
    }
}

/// Boosted ensemble, fusion head and single baseline on one training set.
pub struct BoostReport {
    pub training: BoostTraining,
    pub fusion: FusionTraining,
    pub single: ModelSnapshot,
    pub single_acc: f64,
    pub vote_acc: f64,
    pub discrete_acc: f64,
    pub fusion_acc: f64,
}

pub fn boost_and_fuse(
    exp: &Experiment<'_>,
    train: &LabeledDataset,
    boost: &BoostConfig,
) -> Result<BoostReport> {
    let single = exp.single(train, boost)?;
    let single_acc = exp.dev_accuracy(&single)?;
    let training = exp.boost(train, boost)?;
    let e = &training.ensemble;
    let vote_acc = exp.vote_accuracy(e, VoteKind::Soft)?;
    let discrete_acc = exp.vote_accuracy(e, VoteKind::Discrete)?;
    let fusion = exp.fusion(e, train)?;
    let fusion_acc = exp.fusion_accuracy(e, &fusion.head)?;
    Ok(BoostReport {
        training,
        fusion,
        single,
        single_acc,
        vote_acc,
        discrete_acc,
        fusion_acc,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodAccuracy {
    pub single: Option<f64>,
    pub boost_vote: Option<f64>,
    pub boost_fusion: Option<f64>,
    pub bag: Option<f64>,
    pub teacher: Option<f64>,
    pub distilled: Option<f64>,
}

/// One line of `metrics.jsonl`. Everything except `timing` is a pure
/// function of the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub rounds: Vec<RoundLog>,
    /// Dev accuracy in percent per method.
    pub accuracy: MethodAccuracy,
    pub details: BTreeMap<String, serde_json::Value>,
    pub timing: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let hash = cfg.hash();
        MetricsRecord {
            run_id: format!("{command}-{hash}"),
            command: command.to_string(),
            config_hash: hash,
            rounds: Vec::new(),
            accuracy: MethodAccuracy::default(),
            details: BTreeMap::new(),
            timing: BTreeMap::new(),
        }
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        self.details.insert(
            key.to_string(),
            serde_json::to_value(value).expect("serializable detail"),
        );
    }

    /// The record with wall-clock fields removed.
    pub fn without_timing(&self) -> MetricsRecord {
        MetricsRecord {
            timing: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn append_to(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let line = serde_json::to_string(self).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))
    }

    pub fn read_all(path: &Path) -> Result<Vec<MetricsRecord>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
            })
            .collect()
    }
}

/// Seconds spent in `f`.
pub fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64()))
}

/// One row of the data-fraction sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionRow {
    pub fraction: f64,
    pub train_size: usize,
    pub rounds_kept: usize,
    pub single: f64,
    pub boost_vote: f64,
    pub boost_fusion: f64,
    /// `boost_fusion - single`, in points.
    pub delta: f64,
}

pub fn fraction_sweep(exp: &Experiment<'_>, fractions: &[f64]) -> Result<Vec<FractionRow>> {
    let boost = exp.cfg.boost_config();
    let mut rows = Vec::new();
    for &f in fractions {
        let train = subsample(&exp.task.train, f, derive_seed(exp.cfg.seed, 70))?;
        let r = boost_and_fuse(exp, &train, &boost)?;
        rows.push(FractionRow {
            fraction: f,
            train_size: train.len(),
            rounds_kept: r.training.ensemble.len(),
            single: r.single_acc,
            boost_vote: r.vote_acc,
            boost_fusion: r.fusion_acc,
            delta: r.fusion_acc - r.single_acc,
        });
    }
    Ok(rows)
}
