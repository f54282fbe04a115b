use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::encoder::math::argmax;
use crate::encoder::{
    init_weights, predict_proba, train, EncoderConfig, InitContext, InitStrategy, ModelSnapshot,
    TrainOptions,
};
use crate::error::{Error, Result};
use crate::textdata::{EncodedExample, LabeledDataset};

/// Members fine-tuned independently on unweighted data, each with its own
/// learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct BagEnsemble {
    pub members: Vec<ModelSnapshot>,
    pub learning_rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BagConfig {
    /// Multipliers on `train.learning_rate`, one per member.
    pub lr_multipliers: Vec<f64>,
    pub init: InitStrategy,
    pub train: TrainOptions,
    pub seed: u64,
}

impl Default for BagConfig {
    fn default() -> Self {
        BagConfig {
            lr_multipliers: vec![0.5, 1.0, 2.0],
            init: InitStrategy::Pretrained,
            train: TrainOptions::default(),
            seed: 0,
        }
    }
}

/// `m` multipliers spaced geometrically over `[0.5, 2]`; `m = 3` gives
/// `{0.5, 1, 2}`.
pub fn geometric_multipliers(m: usize) -> Vec<f64> {
    match m {
        0 => vec![],
        1 => vec![1.0],
        _ => (0..m)
            .map(|i| 0.5 * 4f64.powf(i as f64 / (m - 1) as f64))
            .collect(),
    }
}

pub fn bag_train(
    data: &LabeledDataset,
    encoder: &EncoderConfig,
    pretrained: Option<&ModelSnapshot>,
    config: &BagConfig,
) -> Result<BagEnsemble> {
    if config.lr_multipliers.len() < 2 {
        return Err(Error::Config(
            "bagging needs at least two learning rates".into(),
        ));
    }
    let mut unweighted = data.clone();
    unweighted.examples.iter_mut().for_each(|e| e.weight = 1.0);
    // Every member starts from the same draw; only the learning rate varies.
    let ctx = InitContext {
        pretrained,
        ..InitContext::new(encoder, derive_seed(config.seed, 2))
    };
    let mut members = Vec::new();
    let mut learning_rates = Vec::new();
    for &mult in &config.lr_multipliers {
        let opts = TrainOptions {
            learning_rate: config.train.learning_rate * mult,
            ..config.train.clone()
        };
        let init = init_weights(config.init, &ctx)?;
        match train(init, &unweighted, &opts, derive_seed(config.seed, 3)) {
            Ok(out) => {
                members.push(out.model);
                learning_rates.push(opts.learning_rate);
            }
            Err(Error::Diverged { step, .. }) => {
                log::warn!(
                    "bagging member with lr {} diverged at step {step}; dropped",
                    opts.learning_rate
                );
            }
            Err(e) => return Err(e),
        }
    }
    if members.len() < 2 {
        return Err(Error::Degenerate(format!(
            "only {} bagging member(s) survived",
            members.len()
        )));
    }
    Ok(BagEnsemble {
        members,
        learning_rates,
    })
}

impl BagEnsemble {
    /// Unweighted mean of member distributions per example.
    pub fn average_probs(&self, examples: &[EncodedExample]) -> Result<Vec<Vec<f64>>> {
        let mut sum: Option<Vec<Vec<f64>>> = None;
        for m in &self.members {
            let p = predict_proba(m, examples)?;
            sum = Some(match sum {
                None => p,
                Some(mut s) => {
                    for (row, add) in s.iter_mut().zip(&p) {
                        for (a, b) in row.iter_mut().zip(add) {
                            *a += b;
                        }
                    }
                    s
                }
            });
        }
        let n = self.members.len() as f64;
        let mut avg = sum.ok_or_else(|| Error::InvalidArgument("empty bagging ensemble".into()))?;
        avg.iter_mut().flatten().for_each(|v| *v /= n);
        Ok(avg)
    }

    pub fn bag_predict(&self, example: &EncodedExample) -> Result<(usize, Vec<f64>)> {
        let p = self.average_probs(std::slice::from_ref(example))?.remove(0);
        Ok((argmax(&p), p))
    }

    pub fn predict_all(&self, examples: &[EncodedExample]) -> Result<Vec<usize>> {
        Ok(self
            .average_probs(examples)?
            .iter()
            .map(|p| argmax(p))
            .collect())
    }

    pub fn num_params(&self) -> usize {
        self.members.iter().map(|m| m.num_params()).sum()
    }

    /// Writes `member_<i>.bgv` files and `bag.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, m) in self.members.iter().enumerate() {
            m.save(dir.join(format!("member_{i}.bgv")))?;
        }
        let path = dir.join("bag.json");
        let meta = serde_json::json!({ "members": self.members.len(), "learning_rates": self.learning_rates });
        std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("json"))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("bag.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let learning_rates: Vec<f64> = serde_json::from_value(meta["learning_rates"].clone())
            .map_err(|e| Error::Format(format!("bag.json: {e}")))?;
        let members = (0..learning_rates.len())
            .map(|i| ModelSnapshot::load(dir.join(format!("member_{i}.bgv"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(BagEnsemble {
            members,
            learning_rates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::tests::tiny_config;
    use crate::encoder::train::tests::toy_dataset;

    #[test]
    fn multipliers() {
        let m = geometric_multipliers(3);
        assert!(
            (m[0] - 0.5).abs() < 1e-15 && (m[1] - 1.0).abs() < 1e-15 && (m[2] - 2.0).abs() < 1e-15
        );
        assert_eq!(geometric_multipliers(5).len(), 5);
    }

    #[test]
    fn identical_rates_give_identical_members_and_averaging_is_exact() {
        let data = toy_dataset(30, 3);
        let enc = EncoderConfig {
            vocab_size: 14,
            ..tiny_config(3)
        };
        let cfg = BagConfig {
            lr_multipliers: vec![1.0, 1.0],
            init: InitStrategy::Random,
            train: TrainOptions {
                batch_size: 8,
                epochs: 1,
                ..Default::default()
            },
            seed: 4,
        };
        let bag = bag_train(&data, &enc, None, &cfg).unwrap();
        assert_eq!(bag.members[0], bag.members[1]);
        let single = predict_proba(&bag.members[0], &data.examples).unwrap();
        let avg = bag.average_probs(&data.examples).unwrap();
        for (a, b) in avg.iter().flatten().zip(single.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(bag_train(
            &data,
            &enc,
            None,
            &BagConfig {
                lr_multipliers: vec![1.0],
                ..cfg
            }
        )
        .is_err());
    }

    #[test]
    fn two_member_average() {
        // A one-layer softmax regression whose bias alone sets the output.
        let cfg = EncoderConfig {
            learner: crate::encoder::LearnerKind::SoftmaxRegression,
            ..tiny_config(2)
        };
        let member = |p0: f64| {
            let mut m = ModelSnapshot::zeros(cfg.clone()).unwrap();
            let b = m.layout().range("cls.bias");
            m.params[b.start] = (p0 / (1.0 - p0)).ln();
            m
        };
        let bag = BagEnsemble {
            members: vec![member(0.6), member(0.2)],
            learning_rates: vec![1.0, 2.0],
        };
        let ex = toy_dataset(2, 2).examples[0].clone();
        let (label, p) = bag.bag_predict(&ex).unwrap();
        assert_eq!(label, 1);
        assert!((p[0] - 0.4).abs() < 1e-12 && (p[1] - 0.6).abs() < 1e-12);
        let swapped = BagEnsemble {
            members: vec![member(0.2), member(0.6)],
            learning_rates: vec![2.0, 1.0],
        };
        assert_eq!(swapped.bag_predict(&ex).unwrap().0, 1);
    }
}
