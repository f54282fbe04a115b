use serde::{Deserialize, Serialize};

use super::{
    run_boosting, BaseLearner, BoostEnsemble, BoostRound, Member, RoundLog, SharingMode,
    WeightVector,
};
use crate::derive_seed;
use crate::encoder::{
    fresh_head, init_weights, predict, train, EncoderConfig, InitContext, InitStrategy,
    ModelSnapshot, StepRecord, TrainOptions,
};
use crate::error::{Error, Result};
use crate::textdata::{EncodedExample, LabeledDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostConfig {
    /// Maximum number of boosting rounds, M.
    pub rounds: usize,
    pub init: InitStrategy,
    pub sharing: SharingMode,
    pub train: TrainOptions,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            rounds: 9,
            init: InitStrategy::Pretrained,
            sharing: SharingMode::Privacy,
            train: TrainOptions::default(),
            seed: 0,
        }
    }
}

/// Artifacts a boosting run draws on besides the training data.
#[derive(Debug, Clone, Copy)]
pub struct BoostContext<'a> {
    pub encoder: &'a EncoderConfig,
    pub pretrained: Option<&'a ModelSnapshot>,
    /// Held-out split for the per-round log; never used for fitting.
    pub dev: Option<&'a LabeledDataset>,
}

#[derive(Debug, Clone)]
pub struct BoostTraining {
    pub ensemble: BoostEnsemble,
    pub log: Vec<RoundLog>,
    pub final_weights: Vec<f64>,
    /// Uniform-weight fine-tune the `Finetuning` strategy copies from.
    pub finetune_source: Option<ModelSnapshot>,
    /// Optimizer-step log of every fitted round, kept or not.
    pub step_logs: Vec<Vec<StepRecord>>,
}

/// Fine-tunes one encoder per round with the boosting weights on the loss.
pub struct EncoderLearner<'a> {
    data: &'a LabeledDataset,
    config: &'a BoostConfig,
    ctx: BoostContext<'a>,
    finetuned: Option<ModelSnapshot>,
    previous: Option<ModelSnapshot>,
    step_logs: Vec<Vec<StepRecord>>,
}

impl<'a> EncoderLearner<'a> {
    pub fn new(
        data: &'a LabeledDataset,
        config: &'a BoostConfig,
        ctx: BoostContext<'a>,
    ) -> Result<Self> {
        ctx.encoder.validate()?;
        if ctx.encoder.num_classes != data.num_classes() {
            return Err(Error::ConfigMismatch(format!(
                "encoder has K={}, dataset K={}",
                ctx.encoder.num_classes,
                data.num_classes()
            )));
        }
        let finetuned = if config.init == InitStrategy::Finetuning {
            let base = init_weights(
                InitStrategy::Pretrained,
                &InitContext {
                    pretrained: ctx.pretrained,
                    ..InitContext::new(ctx.encoder, derive_seed(config.seed, 0))
                },
            )?;
            let mut uniform = data.clone();
            let w = 1.0 / data.len() as f64;
            uniform.examples.iter_mut().for_each(|e| e.weight = w);
            Some(train(base, &uniform, &config.train, derive_seed(config.seed, 1))?.model)
        } else {
            None
        };
        Ok(EncoderLearner {
            data,
            config,
            ctx,
            finetuned,
            previous: None,
            step_logs: Vec::new(),
        })
    }

    fn initial_model(&self, round: usize) -> Result<ModelSnapshot> {
        let seed = derive_seed(self.config.seed, 2 * round as u64);
        match (&self.previous, self.config.sharing) {
            (Some(trunk), SharingMode::Sharing) => Ok(fresh_head(trunk, seed)),
            _ => init_weights(
                self.config.init,
                &InitContext {
                    config: self.ctx.encoder,
                    seed,
                    pretrained: self.ctx.pretrained,
                    finetuned: self.finetuned.as_ref(),
                    previous: self.previous.as_ref(),
                },
            ),
        }
    }
}

impl BaseLearner<EncodedExample> for EncoderLearner<'_> {
    type Model = ModelSnapshot;

    fn fit(
        &mut self,
        round: usize,
        inputs: &[EncodedExample],
        _labels: &[usize],
        weights: &WeightVector,
    ) -> Result<ModelSnapshot> {
        if inputs.len() != self.data.len() {
            return Err(Error::Shape(
                "inputs are not the learner's training set".into(),
            ));
        }
        let mut weighted = self.data.clone();
        for (e, &w) in weighted.examples.iter_mut().zip(weights.as_slice()) {
            e.weight = w;
        }
        let init = self.initial_model(round)?;
        let seed = derive_seed(self.config.seed, 2 * round as u64 + 1);
        let out = train(init, &weighted, &self.config.train, seed)?;
        self.step_logs.push(out.log);
        self.previous = Some(out.model.clone());
        Ok(out.model)
    }

    fn predict(&self, model: &ModelSnapshot, inputs: &[EncodedExample]) -> Result<Vec<usize>> {
        predict(model, inputs)
    }

    fn evaluate(&self, model: &ModelSnapshot) -> Result<Option<f64>> {
        match self.ctx.dev {
            Some(dev) => {
                let p = predict(model, &dev.examples)?;
                Ok(Some(accuracy(&p, &dev.labels())))
            }
            None => Ok(None),
        }
    }
}

pub(crate) fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
}

/// Stage 1: boosted fine-tuning of up to `config.rounds` encoders.
pub fn boost_train(
    data: &LabeledDataset,
    config: &BoostConfig,
    ctx: BoostContext<'_>,
) -> Result<BoostTraining> {
    let mut learner = EncoderLearner::new(data, config, ctx)?;
    let labels = data.labels();
    let run = run_boosting(
        &mut learner,
        &data.examples,
        &labels,
        data.num_classes(),
        config.rounds,
    )?;
    let shared_trunk = match config.sharing {
        SharingMode::Sharing => run.rounds.last().map(|r| r.model.clone()),
        SharingMode::Privacy => None,
    };
    let rounds = run
        .rounds
        .into_iter()
        .map(|r| BoostRound {
            m: r.round,
            alpha: r.alpha,
            err: r.err,
            member: match config.sharing {
                SharingMode::Privacy => Member::Full(r.model),
                SharingMode::Sharing => Member::Head(r.model.head_params()),
            },
            train_predictions: r.predictions,
        })
        .collect();
    let ensemble = BoostEnsemble::new(rounds, data.num_classes(), config.sharing, shared_trunk)?;
    Ok(BoostTraining {
        ensemble,
        log: run.log,
        final_weights: run.final_weights.into_inner(),
        finetune_source: learner.finetuned,
        step_logs: learner.step_logs,
    })
}

/// The single-model baseline: exactly the first boosting round, fitted
/// under uniform weights.
pub fn single_baseline(
    data: &LabeledDataset,
    config: &BoostConfig,
    ctx: BoostContext<'_>,
) -> Result<ModelSnapshot> {
    let mut learner = EncoderLearner::new(data, config, ctx)?;
    let labels = data.labels();
    let w = super::init_weights_uniform(data.len())?;
    learner.fit(1, &data.examples, &labels, &w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boosting::VoteKind;
    use crate::encoder::tests::tiny_config;
    use crate::encoder::train::tests::toy_dataset;

    fn config(m: usize, init: InitStrategy, sharing: SharingMode) -> BoostConfig {
        BoostConfig {
            rounds: m,
            init,
            sharing,
            train: TrainOptions {
                batch_size: 8,
                epochs: 2,
                ..Default::default()
            },
            seed: 11,
        }
    }

    #[test]
    fn one_round_equals_single_model() {
        let data = toy_dataset(48, 3);
        let enc = EncoderConfig {
            vocab_size: 14,
            ..tiny_config(3)
        };
        let ctx = BoostContext {
            encoder: &enc,
            pretrained: None,
            dev: None,
        };
        let cfg = config(1, InitStrategy::Random, SharingMode::Privacy);
        let boosted = boost_train(&data, &cfg, ctx).unwrap();
        let single = single_baseline(&data, &cfg, ctx).unwrap();
        assert_eq!(boosted.ensemble.len(), 1);
        assert!(boosted.ensemble.rounds[0].alpha > 0.0);
        assert_eq!(
            boosted.ensemble.member_snapshot(0).unwrap().into_owned(),
            single
        );
        assert_eq!(
            boosted
                .ensemble
                .vote_predict_all(&data.examples, VoteKind::Soft)
                .unwrap(),
            predict(&single, &data.examples).unwrap()
        );
    }

    #[test]
    fn deterministic_and_weights_unnormalized() {
        let data = toy_dataset(40, 3);
        let enc = EncoderConfig {
            vocab_size: 14,
            ..tiny_config(3)
        };
        let ctx = BoostContext {
            encoder: &enc,
            pretrained: None,
            dev: Some(&data),
        };
        let cfg = config(3, InitStrategy::Random, SharingMode::Privacy);
        let a = boost_train(&data, &cfg, ctx).unwrap();
        let b = boost_train(&data, &cfg, ctx).unwrap();
        assert_eq!(a.ensemble.to_bytes(), b.ensemble.to_bytes());
        assert_eq!(a.log, b.log);
        let kept: Vec<_> = a.log.iter().filter(|l| l.kept).collect();
        assert_eq!(kept.len(), a.ensemble.len());
        let last = kept.last().unwrap();
        assert_eq!(last.weight_sum, a.final_weights.iter().sum::<f64>());
        assert!(a.log.iter().all(|l| l.dev_acc.is_some()));
    }

    #[test]
    fn sharing_mode_keeps_one_trunk() {
        let data = toy_dataset(40, 3);
        let enc = EncoderConfig {
            vocab_size: 14,
            ..tiny_config(3)
        };
        let pre = init_weights(InitStrategy::Random, &InitContext::new(&enc, 99)).unwrap();
        let ctx = BoostContext {
            encoder: &enc,
            pretrained: Some(&pre),
            dev: None,
        };
        let mut cfg = config(3, InitStrategy::Pretrained, SharingMode::Sharing);
        cfg.train.epochs = 10;
        let out = boost_train(&data, &cfg, ctx).unwrap();
        let e = &out.ensemble;
        assert!(e.shared_trunk.is_some());
        assert!(e.rounds.iter().all(|r| matches!(r.member, Member::Head(_))));
        assert_eq!(e.rounds[0].train_predictions.len(), data.len());
        assert_eq!(
            e.num_params(),
            pre.num_params() + (e.len() - 1) * pre.layout().head_len()
        );
    }

    #[test]
    fn finetuning_needs_a_pretrained_checkpoint() {
        let data = toy_dataset(20, 2);
        let enc = EncoderConfig {
            vocab_size: 11,
            ..tiny_config(2)
        };
        let ctx = BoostContext {
            encoder: &enc,
            pretrained: None,
            dev: None,
        };
        let cfg = config(2, InitStrategy::Finetuning, SharingMode::Privacy);
        assert!(matches!(
            boost_train(&data, &cfg, ctx),
            Err(Error::MissingContext(_))
        ));
    }
}
