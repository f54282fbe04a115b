use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, ModelSnapshot, Rng, Role};
use crate::error::{Error, Result};

/// How each boosting round's base classifier is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Xavier-uniform weights, zero biases, unit LayerNorm gains.
    Random,
    /// Copy of the MLM checkpoint with a freshly drawn classification head.
    Pretrained,
    /// Copy of a model already fine-tuned on the task with uniform weights.
    Finetuning,
    /// Copy of the previous round's fine-tuned model; the first round falls
    /// back to `Pretrained`.
    Incremental,
}

impl InitStrategy {
    pub const ALL: [InitStrategy; 4] = [
        InitStrategy::Random,
        InitStrategy::Pretrained,
        InitStrategy::Finetuning,
        InitStrategy::Incremental,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitStrategy::Random => "random",
            InitStrategy::Pretrained => "pretrained",
            InitStrategy::Finetuning => "finetuning",
            InitStrategy::Incremental => "incremental",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InitContext<'a> {
    pub config: &'a EncoderConfig,
    pub seed: u64,
    pub pretrained: Option<&'a ModelSnapshot>,
    pub finetuned: Option<&'a ModelSnapshot>,
    pub previous: Option<&'a ModelSnapshot>,
}

impl<'a> InitContext<'a> {
    pub fn new(config: &'a EncoderConfig, seed: u64) -> Self {
        InitContext {
            config,
            seed,
            pretrained: None,
            finetuned: None,
            previous: None,
        }
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn fill_random(snapshot: &mut ModelSnapshot, rng: &mut Rng, head_only: bool) {
    for e in snapshot.layout().entries {
        if head_only && !e.is_head() {
            continue;
        }
        let slot = &mut snapshot.params[e.range()];
        if let [fan_in, fan_out] = e.shape[..] {
            let a = xavier_bound(fan_in, fan_out);
            for v in slot.iter_mut() {
                *v = rng.random_range(-a..a);
            }
        } else if e.name.ends_with(".gamma") {
            slot.fill(1.0);
        } else {
            slot.fill(0.0);
        }
    }
}

fn checked_copy(source: &ModelSnapshot, config: &EncoderConfig) -> Result<ModelSnapshot> {
    if !source.config.same_architecture(config) {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint config {:#x} does not match requested {:#x}",
            source.config.hash(),
            config.hash()
        )));
    }
    let mut copy = source.clone();
    copy.config = config.clone();
    Ok(copy)
}

pub fn init_weights(strategy: InitStrategy, ctx: &InitContext<'_>) -> Result<ModelSnapshot> {
    ctx.config.validate()?;
    let mut rng = Rng::seed_from_u64(ctx.seed);
    match strategy {
        InitStrategy::Random => {
            let mut m = ModelSnapshot::zeros(ctx.config.clone())?;
            fill_random(&mut m, &mut rng, false);
            Ok(m)
        }
        InitStrategy::Pretrained => {
            let source = ctx
                .pretrained
                .ok_or(Error::MissingContext("pretrained checkpoint"))?;
            let mut m = checked_copy(source, ctx.config)?;
            fill_random(&mut m, &mut rng, true);
            m.role = Role::Pretrained;
            Ok(m)
        }
        InitStrategy::Finetuning => {
            let source = ctx
                .finetuned
                .ok_or(Error::MissingContext("task fine-tuned snapshot"))?;
            checked_copy(source, ctx.config)
        }
        InitStrategy::Incremental => match ctx.previous {
            Some(prev) => checked_copy(prev, ctx.config),
            None => init_weights(InitStrategy::Pretrained, ctx),
        },
    }
}

/// Copy of `model` with a newly drawn classification head.
pub fn fresh_head(model: &ModelSnapshot, seed: u64) -> ModelSnapshot {
    let mut out = model.clone();
    fill_random(&mut out, &mut Rng::seed_from_u64(seed), true);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::tests::tiny_config;

    #[test]
    fn random_is_xavier_bounded_and_reproducible() {
        let cfg = tiny_config(3);
        let a = init_weights(InitStrategy::Random, &InitContext::new(&cfg, 9)).unwrap();
        let b = init_weights(InitStrategy::Random, &InitContext::new(&cfg, 9)).unwrap();
        assert_eq!(a, b);
        for e in a.layout().entries {
            let vals = &a.params[e.range()];
            match e.shape[..] {
                [i, o] => {
                    let bound = (6.0 / (i + o) as f64).sqrt();
                    assert!(vals.iter().all(|v| v.abs() <= bound), "{}", e.name);
                    assert!(vals.iter().any(|v| *v != 0.0));
                }
                _ if e.name.ends_with(".gamma") => assert!(vals.iter().all(|&v| v == 1.0)),
                _ => assert!(vals.iter().all(|&v| v == 0.0)),
            }
        }
    }

    #[test]
    fn pretrained_copies_trunk_and_redraws_head() {
        let cfg = tiny_config(3);
        let ckpt = init_weights(InitStrategy::Random, &InitContext::new(&cfg, 1)).unwrap();
        let ctx = InitContext {
            pretrained: Some(&ckpt),
            ..InitContext::new(&cfg, 2)
        };
        let m = init_weights(InitStrategy::Pretrained, &ctx).unwrap();
        let head_start = m.layout().head_ranges()[0].start;
        assert_eq!(m.params[..head_start], ckpt.params[..head_start]);
        assert_ne!(m.head_params(), ckpt.head_params());
        assert_eq!(m.role, Role::Pretrained);
    }

    #[test]
    fn incremental_falls_back_to_pretrained() {
        let cfg = tiny_config(3);
        let ckpt = init_weights(InitStrategy::Random, &InitContext::new(&cfg, 1)).unwrap();
        let ctx = InitContext {
            pretrained: Some(&ckpt),
            ..InitContext::new(&cfg, 2)
        };
        assert_eq!(
            init_weights(InitStrategy::Incremental, &ctx).unwrap(),
            init_weights(InitStrategy::Pretrained, &ctx).unwrap()
        );
        let prev = init_weights(InitStrategy::Random, &InitContext::new(&cfg, 5)).unwrap();
        let ctx = InitContext {
            previous: Some(&prev),
            ..ctx
        };
        assert_eq!(init_weights(InitStrategy::Incremental, &ctx).unwrap(), prev);
    }

    #[test]
    fn missing_or_mismatched_context() {
        let cfg = tiny_config(3);
        let ctx = InitContext::new(&cfg, 0);
        assert!(matches!(
            init_weights(InitStrategy::Pretrained, &ctx),
            Err(Error::MissingContext(_))
        ));
        assert!(matches!(
            init_weights(InitStrategy::Finetuning, &ctx),
            Err(Error::MissingContext(_))
        ));
        let other = EncoderConfig {
            d_ffn: 16,
            ..cfg.clone()
        };
        let ckpt = init_weights(InitStrategy::Random, &InitContext::new(&other, 1)).unwrap();
        let ctx = InitContext {
            finetuned: Some(&ckpt),
            ..ctx
        };
        assert!(matches!(
            init_weights(InitStrategy::Finetuning, &ctx),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
