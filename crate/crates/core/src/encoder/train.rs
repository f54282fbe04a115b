use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::math::softmax_in_place;
use super::{Adam, EncoderConfig, ModelSnapshot, Net, Rng, Role};
use crate::error::{Error, Result};
use crate::textdata::LabeledDataset;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLoss {
    /// Mean of the per-example losses over the batch.
    pub mean: f64,
    pub per_example: Vec<f64>,
    /// Number of examples whose gold probability hit `PROB_FLOOR`.
    pub clamped: usize,
}

/// `w_i * -ln p_i[y_i]` per example, averaged; weights are used as given.
pub fn weighted_ce_loss(
    probs: &[Vec<f64>],
    labels: &[usize],
    weights: &[f64],
) -> Result<WeightedLoss> {
    if probs.len() != labels.len() || probs.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} rows, {} labels, {} weights",
            probs.len(),
            labels.len(),
            weights.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut clamped = 0;
    let mut per_example = Vec::with_capacity(probs.len());
    for ((p, &y), &w) in probs.iter().zip(labels).zip(weights) {
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight {w} is not positive"
            )));
        }
        let py = *p
            .get(y)
            .ok_or_else(|| Error::Shape(format!("label {y} outside {} classes", p.len())))?;
        if py < PROB_FLOOR {
            clamped += 1;
        }
        per_example.push(w * -py.max(PROB_FLOOR).ln());
    }
    let mean = per_example.iter().sum::<f64>() / per_example.len() as f64;
    Ok(WeightedLoss {
        mean,
        per_example,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub schedule: LrSchedule,
    /// Fraction of the steps spent warming up linearly from zero.
    pub warmup: f64,
}

/// Learning rate after warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay towards zero at the last step, as in BERT fine-tuning.
    Linear,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 3,
            max_steps: None,
            schedule: LrSchedule::Constant,
            warmup: 0.0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "batch_size and learning_rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::Config(format!(
                "warmup {} must be in [0, 1)",
                self.warmup
            )));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (0-based) of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = (self.warmup * total as f64).ceil() as usize;
        if step < warm {
            return self.learning_rate * (step + 1) as f64 / warm as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Linear => {
                self.learning_rate * (total - step) as f64 / (total - warm) as f64
            }
        }
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch_size.max(1));
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |cap| total.min(cap))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelSnapshot,
    pub log: Vec<StepRecord>,
}

/// What the per-example loss is measured against.
#[derive(Clone, Copy)]
pub enum Objective<'a> {
    /// Gold labels, each example's loss multiplied by its `weight`.
    Weighted,
    /// `lambda * CE(gold) + (1 - lambda) * CE(teacher)`, with `lambda`
    /// taken from `schedule(step, total_steps)`.
    Distill {
        teacher: &'a [Vec<f64>],
        schedule: fn(usize, usize) -> Result<f64>,
    },
}

/// Weighted cross-entropy fine-tuning using each example's `weight`.
pub fn train(
    model: ModelSnapshot,
    data: &LabeledDataset,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    fit(model, data, Objective::Weighted, opts, seed)
}

/// Mini-batch Adam over shuffled batches; deterministic given `seed`.
/// Divergence returns the last parameters that were still finite.
pub fn fit(
    model: ModelSnapshot,
    data: &LabeledDataset,
    objective: Objective<'_>,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot train on an empty dataset".into(),
        ));
    }
    opts.validate()?;
    if data.num_classes() != model.config.num_classes {
        return Err(Error::ConfigMismatch(format!(
            "dataset has {} classes, model {}",
            data.num_classes(),
            model.config.num_classes
        )));
    }
    if let Objective::Distill { teacher, .. } = objective {
        if teacher.len() != data.len() {
            return Err(Error::Shape(format!(
                "{} teacher rows for {} examples",
                teacher.len(),
                data.len()
            )));
        }
    }
    if let Some(e) = data
        .examples
        .iter()
        .find(|e| !(e.weight > 0.0 && e.weight.is_finite()))
    {
        return Err(Error::InvalidArgument(format!(
            "weight {} is not positive",
            e.weight
        )));
    }

    let total = opts.total_steps(data.len());
    let cfg = model.config.clone();
    let net = Net::new(&cfg);
    let mut params = model.params;
    let mut adam = Adam::new(params.len(), opts.learning_rate);
    let mut order_rng = Rng::seed_from_u64(seed);
    let mut dropout_rng = Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(total);
    let mut grad = vec![0.0; params.len()];
    let mut previous = vec![0.0; params.len()];
    let k = cfg.num_classes;

    let mut step = 0;
    'epochs: for _ in 0..opts.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(opts.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let lambda = match objective {
                Objective::Weighted => 1.0,
                Objective::Distill { schedule, .. } => schedule(step, total)?,
            };
            grad.fill(0.0);
            let b = batch.len() as f64;
            let mut loss = 0.0;
            let mut diverged = false;
            for &i in batch {
                let ex = &data.examples[i];
                let (mut probs, trace) = match net.logits(&cfg, &params, ex, Some(&mut dropout_rng))
                {
                    Ok(v) => v,
                    Err(Error::NonFinite { .. }) => {
                        diverged = true;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                softmax_in_place(&mut probs);
                let mut target = vec![0.0; k];
                let coef = match objective {
                    Objective::Weighted => {
                        target[ex.label_id] = 1.0;
                        ex.weight
                    }
                    Objective::Distill { teacher, .. } => {
                        for (t, &q) in target.iter_mut().zip(&teacher[i]) {
                            *t = (1.0 - lambda) * q;
                        }
                        target[ex.label_id] += lambda;
                        1.0
                    }
                };
                let ce: f64 = target
                    .iter()
                    .zip(&probs)
                    .filter(|(t, _)| **t != 0.0)
                    .map(|(t, p)| -t * p.max(super::PROB_FLOOR).ln())
                    .sum();
                loss += coef * ce / b;
                let dlogits: Vec<f64> = probs
                    .iter()
                    .zip(&target)
                    .map(|(p, t)| coef * (p - t) / b)
                    .collect();
                net.backward(&cfg, &params, ex, &trace, &dlogits, &mut grad);
            }
            let diverge = |params: Vec<f64>, cfg: EncoderConfig| Error::Diverged {
                step,
                last_finite: Box::new(ModelSnapshot {
                    config: cfg,
                    role: Role::Finetuned,
                    params,
                }),
            };
            if diverged || !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(diverge(params, cfg));
            }
            previous.copy_from_slice(&params);
            let lr = opts.lr_at(step, total);
            adam.learning_rate = lr;
            adam.update(&mut params, &grad);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(diverge(previous, cfg));
            }
            log.push(StepRecord { step, loss, lr });
            step += 1;
        }
    }

    let role = if step == 0 {
        model.role
    } else {
        Role::Finetuned
    };
    Ok(TrainOutcome {
        model: ModelSnapshot {
            config: cfg,
            role,
            params,
        },
        log,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::encoder::tests::tiny_config;
    use crate::encoder::EncoderConfig;
    use crate::encoder::{init_weights, predict, InitContext, InitStrategy, LearnerKind};
    use crate::textdata::{EncodedExample, CLS, SEP};
    use approx::assert_relative_eq;

    #[test]
    fn warmup_then_linear_decay() {
        let opts = TrainOptions {
            learning_rate: 1.0,
            schedule: LrSchedule::Linear,
            warmup: 0.2,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..10).map(|s| opts.lr_at(s, 10)).collect();
        assert_eq!(
            lrs,
            [0.5, 1.0, 1.0, 0.875, 0.75, 0.625, 0.5, 0.375, 0.25, 0.125]
        );
        let flat = TrainOptions {
            schedule: LrSchedule::Constant,
            warmup: 0.0,
            ..opts
        };
        assert!((0..10).all(|s| flat.lr_at(s, 10) == 1.0));
    }

    #[test]
    fn loss_examples() {
        let l = weighted_ce_loss(&[vec![0.0, 1.0]], &[1], &[3.0]).unwrap();
        assert_eq!(l.per_example, vec![0.0]);
        let l = weighted_ce_loss(&[vec![0.5, 0.5]], &[0], &[2.0]).unwrap();
        assert_relative_eq!(l.mean, 2.0 * std::f64::consts::LN_2, epsilon = 1e-15);

        let probs = vec![vec![0.2, 0.8], vec![0.7, 0.3], vec![0.4, 0.6]];
        let a = weighted_ce_loss(&probs, &[0, 0, 1], &[0.3, 1.0, 2.0]).unwrap();
        let b = weighted_ce_loss(&probs, &[0, 0, 1], &[0.6, 2.0, 4.0]).unwrap();
        assert_eq!(b.mean, 2.0 * a.mean);
    }

    #[test]
    fn loss_clamps_and_rejects_bad_weights() {
        let l = weighted_ce_loss(&[vec![1.0, 0.0]], &[1], &[1.0]).unwrap();
        assert_eq!(l.clamped, 1);
        assert_relative_eq!(l.mean, -(1e-12f64).ln());
        assert!(weighted_ce_loss(&[vec![1.0, 0.0]], &[1], &[0.0]).is_err());
        assert!(weighted_ce_loss(&[vec![1.0, 0.0]], &[1, 0], &[1.0]).is_err());
    }

    /// Label = class of the first content token: ids 5..8 -> 0, 8..11 -> 1, 11.. -> 2.
    pub(crate) fn toy_dataset(n: usize, k: usize) -> LabeledDataset {
        let mut examples = Vec::new();
        for i in 0..n {
            let y = i % k;
            let t = 5 + (3 * y + (i / k) % 3) as u32 % (3 * k as u32);
            let filler = 5 + ((i * 7) % (3 * k)) as u32;
            examples.push(EncodedExample {
                token_ids: vec![CLS, t, filler, SEP],
                segment_ids: vec![0; 4],
                label_id: y,
                weight: 1.0,
            });
        }
        let names = (0..k).map(|c| format!("c{c}")).collect();
        LabeledDataset::new(examples, names).unwrap()
    }

    fn toy_model(k: usize, seed: u64) -> ModelSnapshot {
        let cfg = EncoderConfig {
            vocab_size: 5 + 3 * k,
            ..tiny_config(k)
        };
        init_weights(InitStrategy::Random, &InitContext::new(&cfg, seed)).unwrap()
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let data = toy_dataset(40, 3);
        let opts = TrainOptions {
            batch_size: 8,
            epochs: 2,
            ..Default::default()
        };
        let a = train(toy_model(3, 1), &data, &opts, 5).unwrap();
        let b = train(toy_model(3, 1), &data, &opts, 5).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 10);
        assert_eq!(a.model.role, Role::Finetuned);
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let data = toy_dataset(10, 2);
        let m = toy_model(2, 3);
        for opts in [
            TrainOptions {
                epochs: 0,
                ..Default::default()
            },
            TrainOptions {
                max_steps: Some(0),
                ..Default::default()
            },
        ] {
            let out = train(m.clone(), &data, &opts, 1).unwrap();
            assert_eq!(out.model, m);
            assert!(out.log.is_empty());
        }
    }

    #[test]
    fn learns_separable_toy_task_with_smoothed_loss_decreasing() {
        let data = toy_dataset(90, 3);
        let opts = TrainOptions {
            batch_size: 9,
            epochs: 30,
            learning_rate: 3e-3,
            ..Default::default()
        };
        let mut cfg = toy_model(3, 4).config;
        cfg.dropout_rate = 0.0;
        let m = init_weights(InitStrategy::Random, &InitContext::new(&cfg, 4)).unwrap();
        let out = train(m, &data, &opts, 2).unwrap();
        let smoothed: Vec<f64> = out
            .log
            .chunks(10)
            .map(|w| w.iter().map(|r| r.loss).sum::<f64>() / w.len() as f64)
            .collect();
        for pair in smoothed.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{smoothed:?}");
        }
        let preds = predict(&out.model, &data.examples).unwrap();
        let acc = preds
            .iter()
            .zip(data.labels())
            .filter(|(p, y)| **p == *y)
            .count();
        assert_eq!(acc, data.len());
    }

    #[test]
    fn upweighting_a_class_does_not_lower_its_recall() {
        // Overlapping classes for softmax regression: token 5 appears in both.
        let mut examples = Vec::new();
        for i in 0..60 {
            let y = i % 2;
            let tok = if i % 3 == 0 { 5 } else { 6 + y as u32 };
            examples.push(EncodedExample {
                token_ids: vec![CLS, tok, SEP],
                segment_ids: vec![0; 3],
                label_id: y,
                weight: 1.0,
            });
        }
        let data = LabeledDataset::new(examples, vec!["a".into(), "b".into()]).unwrap();
        let cfg = EncoderConfig {
            learner: LearnerKind::SoftmaxRegression,
            vocab_size: 8,
            num_classes: 2,
            ..Default::default()
        };
        let m = ModelSnapshot::zeros(cfg).unwrap();
        let opts = TrainOptions {
            batch_size: 10,
            epochs: 20,
            learning_rate: 0.05,
            ..Default::default()
        };
        let recall0 = |model: &ModelSnapshot| {
            let preds = predict(model, &data.examples).unwrap();
            let (hit, tot) = data
                .examples
                .iter()
                .zip(&preds)
                .filter(|(e, _)| e.label_id == 0)
                .fold((0, 0), |(h, t), (_, &p)| (h + usize::from(p == 0), t + 1));
            hit as f64 / tot as f64
        };
        let plain = train(m.clone(), &data, &opts, 9).unwrap().model;
        let mut weighted = data.clone();
        for e in weighted.examples.iter_mut() {
            e.weight = if e.label_id == 0 { 10.0 } else { 1.0 };
        }
        let heavy = train(m, &weighted, &opts, 9).unwrap().model;
        assert!(recall0(&heavy) >= recall0(&plain));
        assert_eq!(recall0(&heavy), 1.0);
    }

    #[test]
    fn divergence_returns_last_finite_snapshot() {
        let data = toy_dataset(12, 2);
        let mut m = toy_model(2, 1);
        let r = m.layout().range("cls.weight");
        m.params[r.start] = 1e308;
        let opts = TrainOptions {
            learning_rate: 1e300,
            ..Default::default()
        };
        match train(m, &data, &opts, 0) {
            Err(Error::Diverged { last_finite, .. }) => {
                assert!(last_finite.params.iter().all(|v| v.is_finite()))
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
        }
    }
}
