//! The `boostbert` command line. [`run`] parses arguments, dispatches and
//! maps errors to exit codes: 0 success, 1 runtime failure, 2 invalid
//! configuration or input.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::baselines::{
    format_trajectory, reference_problems, samme_oracle, trajectory_gap, BagEnsemble, OracleRound,
    StumpLearner,
};
use crate::boosting::{run_boosting, BoostEnsemble, SharingMode, VoteKind};
use crate::derive_seed;
use crate::distill::{cached_teacher_targets, teacher_targets};
use crate::encoder::math::argmax;
use crate::encoder::{predict, predict_proba, pretrain_mlm, InitStrategy, ModelSnapshot};
use crate::error::{Error, Result};
use crate::experiment::{
    accuracy_pct, boost_and_fuse, fraction_sweep, timed, Experiment, MetricsRecord, RunConfig, Task,
};
use crate::fusion::{fusion_probs, FusionHead};
use crate::synth::{write_task, SynthConfig, TaskSizes};
use crate::textdata::{
    encode, load_tsv, Columns, EncodedExample, LabelMap, LabeledDataset, RawExample, Vocabulary,
};

/// Default output root when `--out` is not given.
pub const OUT_ENV: &str = "BOOSTBERT_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "boostbert",
    version,
    about = "Boosted transformer text classifiers"
)]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VoteArg {
    Soft,
    Discrete,
}

impl From<VoteArg> for VoteKind {
    fn from(v: VoteArg) -> Self {
        match v {
            VoteArg::Soft => VoteKind::Soft,
            VoteArg::Discrete => VoteKind::Discrete,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to `$BOOSTBERT_OUT/<run id>` or `runs/<run id>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub vote: Option<VoteArg>,
    /// Override a config key, e.g. `--set boost.rounds=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Reuse a pre-trained checkpoint instead of pre-training.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    InitStrategy,
    SharingMode,
    EnsembleKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Auto,
    Fusion,
    Vote,
    Single,
    Student,
    Bag,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Boost, fuse and compare against the single-model baseline.
    TrainBoost(Common),
    /// Bagging baseline with one member per boosting round.
    TrainBag(Common),
    /// Fit a fusion head on a saved ensemble.
    Fusion {
        #[command(flatten)]
        common: Common,
        /// Directory holding `ensemble.bge`.
        #[arg(long)]
        ensemble: PathBuf,
    },
    /// Distil a saved ensemble into one encoder.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Output directory of a `train-boost` run.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Accuracy, per-class recall and confusion matrix of a saved model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Labelled TSV to evaluate on.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        kind: ModelKind,
        #[arg(long, value_enum)]
        vote: Option<VoteArg>,
        /// Where to write `eval.json`; defaults to the model directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Boosting gain over the single model at several training-set sizes.
    Fractions {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.2,1.0")]
        fractions: Vec<f64>,
    },
    /// Grid over initialization, sharing mode and ensemble kind.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, value_delimiter = ',', required = true)]
        axes: Vec<Axis>,
        /// Run grid cells on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Diff the boosting engine against the reference SAMME implementation.
    OracleCheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        rounds: usize,
    },
    /// Write the synthetic task and a matching config.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 2000)]
        dev: usize,
        #[arg(long, default_value_t = 8000)]
        corpus: usize,
        #[arg(long, default_value_t = 0.02)]
        label_noise: f64,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::ConfigMismatch(_)
        | Error::InvalidArgument(_)
        | Error::MissingContext(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::TrainBoost(c) => train_boost(&c).map(|_| 0),
        Command::TrainBag(c) => train_bag(&c).map(|_| 0),
        Command::Fusion { common, ensemble } => fusion(&common, &ensemble).map(|_| 0),
        Command::Distill { common, teacher } => distill(&common, &teacher).map(|_| 0),
        Command::Eval {
            model,
            data,
            kind,
            vote,
            out,
        } => eval(&model, &data, kind, vote.map(Into::into), out.as_deref()).map(|_| 0),
        Command::Fractions { common, fractions } => fractions_cmd(&common, &fractions).map(|_| 0),
        Command::Compare {
            common,
            axes,
            parallel,
        } => compare(&common, &axes, parallel),
        Command::OracleCheck { out, seed, rounds } => oracle_check(out.as_deref(), seed, rounds),
        Command::GenData {
            out,
            seed,
            train,
            dev,
            corpus,
            label_noise,
        } => {
            let cfg = SynthConfig {
                label_noise,
                ..Default::default()
            };
            gen_data(&out, &cfg, TaskSizes { train, dev, corpus }, seed).map(|_| 0)
        }
    }
}

fn load_config(common: &Common, fallback: Option<&Path>) -> Result<RunConfig> {
    let path = common
        .config
        .as_deref()
        .or(fallback)
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(v) = common.vote {
        let name = match v {
            VoteArg::Soft => "soft",
            VoteArg::Discrete => "discrete",
        };
        overrides.push(format!("vote=\"{name}\""));
    }
    let cfg = RunConfig::load(path, &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(common: &Common, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => {
            let root =
                std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(format!("{command}-{}", cfg.hash()))
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(
        path,
        serde_json::to_string_pretty(value).expect("serializable") + "\n",
    )
}

/// Resolved config, vocabulary and label names: enough to re-encode data.
fn write_setup(dir: &Path, cfg: &RunConfig, task: &Task) -> Result<()> {
    write_file(&dir.join("config.toml"), cfg.to_toml())?;
    task.vocab.save(dir.join("vocab.txt"))?;
    write_file(
        &dir.join("labels.txt"),
        task.labels.names().join("\n") + "\n",
    )
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Config(format!(
            "missing artifact {}",
            path.display()
        )))
    }
}

struct Setup {
    config: PathBuf,
    vocab: Vocabulary,
    labels: LabelMap,
}

fn load_setup(dir: &Path) -> Result<Setup> {
    let config = require(dir.join("config.toml"))?;
    let vocab = Vocabulary::load(require(dir.join("vocab.txt"))?)?;
    let path = require(dir.join("labels.txt"))?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let labels = LabelMap::new(
        text.lines()
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
    )?;
    Ok(Setup {
        config,
        vocab,
        labels,
    })
}

fn pretrained_for(
    cfg: &RunConfig,
    task: &Task,
    flag: Option<&Path>,
    fallback: Option<&Path>,
    always: bool,
) -> Result<Option<ModelSnapshot>> {
    let use_it = cfg.needs_pretraining() || (always && cfg.data.corpus.is_some());
    if !use_it || cfg.model.learner != crate::encoder::LearnerKind::Transformer {
        return Ok(None);
    }
    if let Some(p) = flag.or(fallback.filter(|p| p.is_file())) {
        let snap = ModelSnapshot::load(p)?;
        if snap.config != task.encoder {
            return Err(Error::ConfigMismatch(format!(
                "pre-trained checkpoint {} does not match the task's encoder",
                p.display()
            )));
        }
        return Ok(Some(snap));
    }
    log::info!("pre-training on {} corpus sequences", task.corpus.len());
    let ckpt = pretrain_mlm(
        &task.corpus,
        &task.encoder,
        &cfg.pretrain,
        derive_seed(cfg.seed, 50),
    )?;
    Ok(Some(ckpt.snapshot))
}

fn save_pretrained(dir: &Path, snap: &Option<ModelSnapshot>) -> Result<()> {
    match snap {
        Some(s) => s.save(dir.join("pretrained.bgv")),
        None => Ok(()),
    }
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect()
}

/// Output of `train-boost`.
pub struct BoostSummary {
    pub dir: PathBuf,
    pub metrics: MetricsRecord,
}

pub fn train_boost(common: &Common) -> Result<BoostSummary> {
    let start = Instant::now();
    let cfg = load_config(common, None)?;
    let task = Task::load(&cfg)?;
    let dir = output_dir(common, "train-boost", &cfg)?;
    write_setup(&dir, &cfg, &task)?;
    let pretrained = pretrained_for(&cfg, &task, common.pretrained.as_deref(), None, false)?;
    save_pretrained(&dir, &pretrained)?;
    let exp = Experiment::with_pretrained(&cfg, &task, pretrained);
    let r = boost_and_fuse(&exp, &task.train, &cfg.boost_config())?;
    let e = &r.training.ensemble;
    r.single.save(dir.join("single.bgv"))?;
    e.save(dir.join("ensemble.bge"))?;
    r.fusion.head.save(dir.join("fusion.bgf"))?;
    write_file(&dir.join("rounds.jsonl"), jsonl(&r.training.log))?;
    write_file(&dir.join("fusion_log.jsonl"), jsonl(&r.fusion.log))?;

    let mut m = MetricsRecord::new("train-boost", &cfg);
    m.rounds = r.training.log.clone();
    m.accuracy.single = Some(r.single_acc);
    m.accuracy.boost_vote = Some(match cfg.vote {
        VoteKind::Soft => r.vote_acc,
        VoteKind::Discrete => r.discrete_acc,
    });
    m.accuracy.boost_fusion = Some(r.fusion_acc);
    m.detail("soft_vote", r.vote_acc);
    m.detail("discrete_vote", r.discrete_acc);
    m.detail("rounds_kept", e.len());
    m.detail("alphas", e.alphas());
    m.detail("fusion_best_epoch", r.fusion.best_epoch);
    m.detail("ensemble_params", e.num_params());
    m.detail("fusion_params", r.fusion.head.num_params());
    m.detail("ensemble_hash", format!("{:016x}", e.hash()));
    m.timing
        .insert("wall_s".into(), start.elapsed().as_secs_f64());
    m.append_to(&dir.join("metrics.jsonl"))?;
    println!(
        "single {:.2}  boost-vote {:.2}  boost-fusion {:.2}  ({} rounds kept)  -> {}",
        r.single_acc,
        r.vote_acc,
        r.fusion_acc,
        e.len(),
        dir.display()
    );
    Ok(BoostSummary { dir, metrics: m })
}

pub fn train_bag(common: &Common) -> Result<BoostSummary> {
    let start = Instant::now();
    let cfg = load_config(common, None)?;
    let task = Task::load(&cfg)?;
    let dir = output_dir(common, "train-bag", &cfg)?;
    write_setup(&dir, &cfg, &task)?;
    let pretrained = pretrained_for(&cfg, &task, common.pretrained.as_deref(), None, false)?;
    let exp = Experiment::with_pretrained(&cfg, &task, pretrained);
    let bag = exp.bag(cfg.boost.rounds)?;
    bag.save(&dir)?;
    let acc = exp.bag_accuracy(&bag)?;
    let mut m = MetricsRecord::new("train-bag", &cfg);
    m.accuracy.bag = Some(acc);
    m.detail("members", bag.members.len());
    m.detail("learning_rates", &bag.learning_rates);
    m.detail("params", bag.num_params());
    m.timing
        .insert("wall_s".into(), start.elapsed().as_secs_f64());
    m.append_to(&dir.join("metrics.jsonl"))?;
    println!(
        "bag {acc:.2}  ({} members)  -> {}",
        bag.members.len(),
        dir.display()
    );
    Ok(BoostSummary { dir, metrics: m })
}

pub fn fusion(common: &Common, ensemble_dir: &Path) -> Result<BoostSummary> {
    let start = Instant::now();
    let setup = load_setup(ensemble_dir)?;
    let ensemble = BoostEnsemble::load(require(ensemble_dir.join("ensemble.bge"))?)?;
    let cfg = load_config(common, Some(&setup.config))?;
    let task = Task::load_with(&cfg, setup.vocab, setup.labels)?;
    let dir = output_dir(common, "fusion", &cfg)?;
    write_setup(&dir, &cfg, &task)?;
    let exp = Experiment::with_pretrained(&cfg, &task, None);
    let trained = exp.fusion(&ensemble, &task.train)?;
    trained.head.save(dir.join("fusion.bgf"))?;
    ensemble.save(dir.join("ensemble.bge"))?;
    write_file(&dir.join("fusion_log.jsonl"), jsonl(&trained.log))?;
    let fusion_acc = exp.fusion_accuracy(&ensemble, &trained.head)?;
    let vote_acc = exp.vote_accuracy(&ensemble, cfg.vote)?;
    let mut m = MetricsRecord::new("fusion", &cfg);
    m.accuracy.boost_vote = Some(vote_acc);
    m.accuracy.boost_fusion = Some(fusion_acc);
    m.detail("fusion_best_epoch", trained.best_epoch);
    m.detail("fusion_params", trained.head.num_params());
    m.timing
        .insert("wall_s".into(), start.elapsed().as_secs_f64());
    m.append_to(&dir.join("metrics.jsonl"))?;
    println!(
        "boost-vote {vote_acc:.2}  boost-fusion {fusion_acc:.2}  -> {}",
        dir.display()
    );
    Ok(BoostSummary { dir, metrics: m })
}

pub fn distill(common: &Common, teacher_dir: &Path) -> Result<BoostSummary> {
    let start = Instant::now();
    let setup = load_setup(teacher_dir)?;
    let ensemble = BoostEnsemble::load(require(teacher_dir.join("ensemble.bge"))?)?;
    let cfg = load_config(common, Some(&setup.config))?;
    let head = if cfg.distill.from_fusion {
        let h = FusionHead::load(require(teacher_dir.join("fusion.bgf"))?)?;
        h.check_binding(&ensemble)?;
        Some(h)
    } else {
        None
    };
    let task = Task::load_with(&cfg, setup.vocab, setup.labels)?;
    let dir = output_dir(common, "distill", &cfg)?;
    write_setup(&dir, &cfg, &task)?;
    let pretrained = pretrained_for(
        &cfg,
        &task,
        common.pretrained.as_deref(),
        Some(&teacher_dir.join("pretrained.bgv")),
        false,
    )?;
    let exp = Experiment::with_pretrained(&cfg, &task, pretrained);

    let teacher = cached_teacher_targets(
        &dir.join("teacher.bgt"),
        &ensemble,
        head.as_ref(),
        &task.train,
    )?;
    let out = exp.distill(&teacher)?;
    out.student.save(dir.join("student.bgv"))?;
    write_file(&dir.join("distill_steps.jsonl"), jsonl(&out.log))?;

    let dev = &task.dev.examples;
    let gold = task.dev.labels();
    let (teacher_probs, teacher_s) = timed(|| teacher_targets(&ensemble, head.as_ref(), dev))?;
    let teacher_acc = accuracy_pct(
        &teacher_probs.iter().map(|p| argmax(p)).collect::<Vec<_>>(),
        &gold,
    );
    let (student_pred, student_s) = timed(|| predict(&out.student, dev))?;
    let student_acc = accuracy_pct(&student_pred, &gold);
    let single_path = teacher_dir.join("single.bgv");
    let single_acc = if single_path.is_file() {
        Some(exp.dev_accuracy(&ModelSnapshot::load(&single_path)?)?)
    } else {
        None
    };

    let teacher_params = ensemble.num_params() + head.as_ref().map_or(0, |h| h.num_params());
    let student_params = out.student.num_params();
    let mut m = MetricsRecord::new("distill", &cfg);
    m.accuracy.single = single_acc;
    m.accuracy.teacher = Some(teacher_acc);
    m.accuracy.distilled = Some(student_acc);
    m.detail("teacher_members", ensemble.len());
    m.detail("teacher_params", teacher_params);
    m.detail("student_params", student_params);
    m.detail("param_ratio", student_params as f64 / teacher_params as f64);
    m.detail("teacher_from_fusion", head.is_some());
    m.timing.insert("teacher_inference_s".into(), teacher_s);
    m.timing.insert("student_inference_s".into(), student_s);
    m.timing
        .insert("inference_ratio".into(), student_s / teacher_s);
    m.timing
        .insert("wall_s".into(), start.elapsed().as_secs_f64());
    m.append_to(&dir.join("metrics.jsonl"))?;
    println!(
        "teacher {teacher_acc:.2}  student {student_acc:.2}  params {student_params}/{teacher_params}  time {:.3}s/{:.3}s  -> {}",
        student_s,
        teacher_s,
        dir.display()
    );
    Ok(BoostSummary { dir, metrics: m })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub model: String,
    pub n: usize,
    pub accuracy: f64,
    pub labels: Vec<String>,
    pub recall: Vec<Option<f64>>,
    /// `confusion[gold][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

fn resolve_kind(dir: &Path, kind: ModelKind) -> Result<ModelKind> {
    if kind != ModelKind::Auto {
        return Ok(kind);
    }
    let has = |f: &str| dir.join(f).is_file();
    [
        ("fusion.bgf", ModelKind::Fusion),
        ("ensemble.bge", ModelKind::Vote),
        ("student.bgv", ModelKind::Student),
        ("bag.json", ModelKind::Bag),
        ("single.bgv", ModelKind::Single),
    ]
    .into_iter()
    .find(|(f, _)| has(f))
    .map(|(_, k)| k)
    .ok_or_else(|| Error::Config(format!("no model artifacts in {}", dir.display())))
}

enum Loaded {
    Fusion(BoostEnsemble, FusionHead),
    Vote(BoostEnsemble),
    Encoder(ModelSnapshot),
    Bag(BagEnsemble),
}

/// A trained model read back from a run directory together with the
/// vocabulary and label names it was trained with.
pub struct SavedModel {
    pub kind: ModelKind,
    pub vocab: Vocabulary,
    pub labels: LabelMap,
    pub config: RunConfig,
    loaded: Loaded,
}

impl SavedModel {
    pub fn load(dir: &Path, kind: ModelKind) -> Result<SavedModel> {
        let setup = load_setup(dir)?;
        let config = RunConfig::load(&setup.config, &[])?;
        let kind = resolve_kind(dir, kind)?;
        let ensemble = || BoostEnsemble::load(require(dir.join("ensemble.bge"))?);
        let loaded = match kind {
            ModelKind::Fusion => {
                let e = ensemble()?;
                let h = FusionHead::load(require(dir.join("fusion.bgf"))?)?;
                h.check_binding(&e)?;
                Loaded::Fusion(e, h)
            }
            ModelKind::Vote => Loaded::Vote(ensemble()?),
            ModelKind::Single => {
                Loaded::Encoder(ModelSnapshot::load(require(dir.join("single.bgv"))?)?)
            }
            ModelKind::Student => {
                Loaded::Encoder(ModelSnapshot::load(require(dir.join("student.bgv"))?)?)
            }
            ModelKind::Bag => Loaded::Bag(BagEnsemble::load(dir)?),
            ModelKind::Auto => unreachable!("resolved by resolve_kind"),
        };
        Ok(SavedModel {
            kind,
            vocab: setup.vocab,
            labels: setup.labels,
            config,
            loaded,
        })
    }

    /// Encodes unlabelled single-segment texts.
    pub fn encode_texts(&self, texts: &[String]) -> Vec<EncodedExample> {
        texts
            .iter()
            .map(|t| {
                let raw = RawExample {
                    label: self.labels.names()[0].clone(),
                    text_a: t.clone(),
                    text_b: None,
                };
                encode(
                    &raw,
                    &self.vocab,
                    &self.labels,
                    self.config.model.max_seq_len,
                )
                .expect("known label")
            })
            .collect()
    }

    /// Class scores per example: probabilities, or vote totals divided by
    /// the sum of alphas for the vote kinds.
    pub fn scores(
        &self,
        examples: &[EncodedExample],
        vote: Option<VoteKind>,
    ) -> Result<Vec<Vec<f64>>> {
        match &self.loaded {
            Loaded::Fusion(e, h) => fusion_probs(e, h, examples),
            Loaded::Vote(e) => {
                let total: f64 = e.alphas().iter().sum();
                let probs = e.member_probs(examples)?;
                Ok(
                    e.scores_from_probs(&probs, vote.unwrap_or(self.config.vote))
                        .into_iter()
                        .map(|row| row.into_iter().map(|v| v / total).collect())
                        .collect(),
                )
            }
            Loaded::Encoder(m) => predict_proba(m, examples),
            Loaded::Bag(b) => b.average_probs(examples),
        }
    }

    pub fn predict(
        &self,
        examples: &[EncodedExample],
        vote: Option<VoteKind>,
    ) -> Result<Vec<usize>> {
        Ok(self
            .scores(examples, vote)?
            .iter()
            .map(|p| argmax(p))
            .collect())
    }
}

pub fn eval(
    model_dir: &Path,
    data: &Path,
    kind: ModelKind,
    vote: Option<VoteKind>,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let model = SavedModel::load(model_dir, kind)?;
    let raw = load_tsv(data, Columns::Any)?;
    let ds = LabeledDataset::encode_all(
        &raw,
        &model.vocab,
        &model.labels,
        model.config.model.max_seq_len,
    )?;
    if ds.is_empty() {
        return Err(Error::EmptyFile(data.to_path_buf()));
    }
    let pred = model.predict(&ds.examples, vote)?;
    let k = model.labels.len();
    let gold = ds.labels();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&g, &p) in gold.iter().zip(&pred) {
        confusion[g][p] += 1;
    }
    let recall = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| 100.0 * row[c] as f64 / n as f64)
        })
        .collect();
    let report = EvalReport {
        model: format!("{:?}", model.kind).to_lowercase(),
        n: ds.len(),
        accuracy: accuracy_pct(&pred, &gold),
        labels: model.labels.names().to_vec(),
        recall,
        confusion,
    };
    print!("{}", format_eval(&report));
    let out = out.unwrap_or(model_dir);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("eval.json"), &report)?;
    Ok(report)
}

fn format_eval(r: &EvalReport) -> String {
    let mut s = format!(
        "{} model, {} examples, accuracy {:.2}\n",
        r.model, r.n, r.accuracy
    );
    let width = r.labels.iter().map(String::len).max().unwrap_or(0).max(6);
    let _ = write!(s, "{:width$}  recall ", "gold");
    for l in &r.labels {
        let _ = write!(s, " {l:>width$}");
    }
    s.push('\n');
    for (i, l) in r.labels.iter().enumerate() {
        let recall = r.recall[i].map_or("     -".to_string(), |v| format!("{v:6.2}"));
        let _ = write!(s, "{l:width$}  {recall} ");
        for c in &r.confusion[i] {
            let _ = write!(s, " {c:>width$}");
        }
        s.push('\n');
    }
    s
}

pub fn fractions_cmd(common: &Common, fractions: &[f64]) -> Result<PathBuf> {
    let start = Instant::now();
    if fractions.is_empty() {
        return Err(Error::Config("--fractions needs at least one value".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
    }
    let cfg = load_config(common, None)?;
    let task = Task::load(&cfg)?;
    let dir = output_dir(common, "fractions", &cfg)?;
    write_setup(&dir, &cfg, &task)?;
    let pretrained = pretrained_for(&cfg, &task, common.pretrained.as_deref(), None, false)?;
    let exp = Experiment::with_pretrained(&cfg, &task, pretrained);
    let rows = fraction_sweep(&exp, fractions)?;
    let mut table =
        String::from("fraction\ttrain\trounds\tsingle\tboost_vote\tboost_fusion\tdelta\n");
    for r in &rows {
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:+.2}",
            r.fraction,
            r.train_size,
            r.rounds_kept,
            r.single,
            r.boost_vote,
            r.boost_fusion,
            r.delta
        );
    }
    print!("{table}");
    write_file(&dir.join("fractions.tsv"), &table)?;
    write_json(&dir.join("fractions.json"), &rows)?;
    let mut m = MetricsRecord::new("fractions", &cfg);
    m.detail("rows", &rows);
    m.timing
        .insert("wall_s".into(), start.elapsed().as_secs_f64());
    m.append_to(&dir.join("metrics.jsonl"))?;
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub init_strategy: String,
    pub sharing_mode: String,
    pub ensemble_kind: String,
    pub rounds_kept: Option<usize>,
    pub single: Option<f64>,
    pub boost_vote: Option<f64>,
    pub boost_fusion: Option<f64>,
    pub bag: Option<f64>,
    pub error: Option<String>,
}

impl CompareRow {
    /// Headline accuracy of the cell: fusion for boosting, the average for
    /// bagging.
    pub fn accuracy(&self) -> Option<f64> {
        self.boost_fusion.or(self.bag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EnsembleKind {
    Boost,
    Bag,
}

fn grid(cfg: &RunConfig, axes: &[Axis]) -> Vec<(InitStrategy, SharingMode, EnsembleKind)> {
    let inits = if axes.contains(&Axis::InitStrategy) {
        InitStrategy::ALL.to_vec()
    } else {
        vec![cfg.boost.init]
    };
    let sharings = if axes.contains(&Axis::SharingMode) {
        vec![SharingMode::Privacy, SharingMode::Sharing]
    } else {
        vec![cfg.boost.sharing]
    };
    let kinds = if axes.contains(&Axis::EnsembleKind) {
        vec![EnsembleKind::Boost, EnsembleKind::Bag]
    } else {
        vec![EnsembleKind::Boost]
    };
    let mut cells = Vec::new();
    for &i in &inits {
        for &s in &sharings {
            for &k in &kinds {
                cells.push((i, s, k));
            }
        }
    }
    cells
}

fn sharing_name(s: SharingMode) -> &'static str {
    match s {
        SharingMode::Privacy => "privacy",
        SharingMode::Sharing => "sharing",
    }
}

fn run_cell(
    base: &RunConfig,
    task: &Task,
    pretrained: &Option<ModelSnapshot>,
    cell: (InitStrategy, SharingMode, EnsembleKind),
) -> (CompareRow, Option<MetricsRecord>) {
    let (init, sharing, kind) = cell;
    let mut cfg = base.clone();
    cfg.boost.init = init;
    cfg.boost.sharing = sharing;
    let mut row = CompareRow {
        init_strategy: init.name().into(),
        sharing_mode: sharing_name(sharing).into(),
        ensemble_kind: if kind == EnsembleKind::Boost {
            "boost"
        } else {
            "bag"
        }
        .into(),
        rounds_kept: None,
        single: None,
        boost_vote: None,
        boost_fusion: None,
        bag: None,
        error: None,
    };
    let start = Instant::now();
    let exp = Experiment::with_pretrained(&cfg, task, pretrained.clone());
    let mut m = MetricsRecord::new("compare", &cfg);
    let result = match kind {
        EnsembleKind::Boost => boost_and_fuse(&exp, &task.train, &cfg.boost_config()).map(|r| {
            row.rounds_kept = Some(r.training.ensemble.len());
            row.single = Some(r.single_acc);
            row.boost_vote = Some(r.vote_acc);
            row.boost_fusion = Some(r.fusion_acc);
            m.rounds = r.training.log;
        }),
        EnsembleKind::Bag => exp.bag(cfg.boost.rounds).and_then(|b| {
            row.bag = Some(exp.bag_accuracy(&b)?);
            Ok(())
        }),
    };
    match result {
        Ok(()) => {
            m.accuracy.single = row.single;
            m.accuracy.boost_vote = row.boost_vote;
            m.accuracy.boost_fusion = row.boost_fusion;
            m.accuracy.bag = row.bag;
            m.detail("cell", &row);
            m.timing
                .insert("wall_s".into(), start.elapsed().as_secs_f64());
            (row, Some(m))
        }
        Err(e) => {
            log::error!(
                "{} / {} / {} failed: {e}",
                row.init_strategy,
                row.sharing_mode,
                row.ensemble_kind
            );
            row.error = Some(e.to_string());
            (row, None)
        }
    }
}

/// Runs the grid; exits 1 when any cell failed, after finishing the rest.
pub fn compare(common: &Common, axes: &[Axis], parallel: bool) -> Result<i32> {
    let (code, _) = compare_rows(common, axes, parallel)?;
    Ok(code)
}

pub fn compare_rows(
    common: &Common,
    axes: &[Axis],
    parallel: bool,
) -> Result<(i32, Vec<CompareRow>)> {
    if axes.is_empty() {
        return Err(Error::Config("--axes needs at least one axis".into()));
    }
    let cfg = load_config(common, None)?;
    let task = Task::load(&cfg)?;
    let dir = output_dir(common, "compare", &cfg)?;
    write_setup(&dir, &cfg, &task)?;
    let cells = grid(&cfg, axes);
    let pretrained = pretrained_for(&cfg, &task, common.pretrained.as_deref(), None, true)?;
    let results: Vec<(CompareRow, Option<MetricsRecord>)> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cells
                .iter()
                .map(|&c| {
                    let (cfg, task, pretrained) = (&cfg, &task, &pretrained);
                    s.spawn(move || run_cell(cfg, task, pretrained, c))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("grid cell panicked"))
                .collect()
        })
    } else {
        cells
            .iter()
            .map(|&c| run_cell(&cfg, &task, &pretrained, c))
            .collect()
    };
    let mut table = String::from("init\tsharing\tkind\trounds\tsingle\tvote\tfusion\tbag\terror\n");
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
    for (row, m) in &results {
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            row.init_strategy,
            row.sharing_mode,
            row.ensemble_kind,
            row.rounds_kept.map_or("-".into(), |v| v.to_string()),
            opt(row.single),
            opt(row.boost_vote),
            opt(row.boost_fusion),
            opt(row.bag),
            row.error.as_deref().unwrap_or("-")
        );
        if let Some(m) = m {
            m.append_to(&dir.join("metrics.jsonl"))?;
        }
    }
    print!("{table}");
    write_file(&dir.join("summary.tsv"), &table)?;
    let rows: Vec<CompareRow> = results.into_iter().map(|(r, _)| r).collect();
    write_json(&dir.join("summary.json"), &rows)?;
    let failed = rows.iter().any(|r| r.error.is_some());
    Ok((i32::from(failed), rows))
}

/// Problem name, gap, oracle and engine trajectories as text.
pub type OracleGap = (String, Option<f64>, String, String);

/// Gap per reference problem, `None` when the chosen stumps differ.
pub fn oracle_gaps(seed: u64, rounds: usize) -> Result<Vec<OracleGap>> {
    let mut out = Vec::new();
    for p in reference_problems(seed) {
        let oracle = samme_oracle(&p.features, &p.labels, rounds, p.num_classes)?;
        let mut learner = StumpLearner {
            num_classes: p.num_classes,
        };
        let run = run_boosting(&mut learner, &p.features, &p.labels, p.num_classes, rounds)?;
        let engine: Vec<OracleRound> = run
            .rounds
            .iter()
            .map(|r| OracleRound {
                m: r.round,
                stump: r.model,
                err: r.err,
                alpha: r.alpha,
                weights: r.weights_after.as_slice().to_vec(),
            })
            .collect();
        out.push((
            p.name.to_string(),
            trajectory_gap(&oracle, &run),
            format_trajectory(&oracle),
            format_trajectory(&engine),
        ));
    }
    Ok(out)
}

pub const ORACLE_TOL: f64 = 1e-12;

pub fn oracle_check(out: Option<&Path>, seed: u64, rounds: usize) -> Result<i32> {
    if rounds == 0 {
        return Err(Error::Config("--rounds must be >= 1".into()));
    }
    let mut ok = true;
    for (name, gap, oracle, engine) in oracle_gaps(seed, rounds)? {
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_file(&dir.join(format!("{name}.oracle.txt")), oracle)?;
            write_file(&dir.join(format!("{name}.engine.txt")), engine)?;
        }
        match gap {
            Some(g) if g <= ORACLE_TOL => println!("{name}: match (max gap {g:.3e})"),
            Some(g) => {
                ok = false;
                println!("{name}: MISMATCH (max gap {g:.3e})");
            }
            None => {
                ok = false;
                println!("{name}: MISMATCH (different stumps or round counts)");
            }
        }
    }
    Ok(if ok { 0 } else { 1 })
}

/// Writes the task plus a `config.toml` pointing at it.
pub fn gen_data(dir: &Path, cfg: &SynthConfig, sizes: TaskSizes, seed: u64) -> Result<PathBuf> {
    write_task(dir, cfg, sizes, seed)?;
    let config = format!(
        "seed = {seed}\n\n[data]\ntrain = \"train.tsv\"\ndev = \"dev.tsv\"\ncorpus = \"corpus.txt\"\n\n\
         # Settings for the small default encoder on this task.\n[train]\nepochs = 4\nlearning_rate = 2e-3\n\n\
         # Soft targets slow the student down.\n[distill]\nepochs = 8\n"
    );
    let path = dir.join("config.toml");
    write_file(&path, config)?;
    println!(
        "wrote {} train, {} dev, {} corpus lines to {}",
        sizes.train,
        sizes.dev,
        sizes.corpus,
        dir.display()
    );
    Ok(path)
}
