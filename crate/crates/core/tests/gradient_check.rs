//! Central finite-difference checks of the analytic encoder gradients, and a
//! second, independently written forward pass used as an oracle.

use boostbert::encoder::{
    gradients, init_weights, predict_proba, train, EncoderConfig, InitContext, InitStrategy,
    LearnerKind, ModelSnapshot, TrainOptions,
};
use boostbert::textdata::{EncodedExample, LabeledDataset, CLS, SEP};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn config(learner: LearnerKind) -> EncoderConfig {
    EncoderConfig {
        learner,
        vocab_size: 14,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 10,
        max_seq_len: 10,
        dropout_rate: 0.1,
        num_classes: 3,
    }
}

fn example(a: &[u32], b: Option<&[u32]>, label: usize) -> EncodedExample {
    let mut token_ids = vec![CLS];
    token_ids.extend_from_slice(a);
    token_ids.push(SEP);
    let mut segment_ids = vec![0u8; token_ids.len()];
    if let Some(b) = b {
        token_ids.extend_from_slice(b);
        token_ids.push(SEP);
        segment_ids.resize(token_ids.len(), 1);
    }
    EncodedExample {
        token_ids,
        segment_ids,
        label_id: label,
        weight: 1.0,
    }
}

fn batch() -> Vec<EncodedExample> {
    vec![
        example(&[5, 6, 7], None, 0),
        example(&[8, 9], Some(&[10, 5]), 2),
        example(&[11], None, 1),
        example(&[12, 13, 6, 6, 7], None, 2),
    ]
}

fn loss_at(model: &ModelSnapshot, batch: &[EncodedExample], weights: &[f64]) -> f64 {
    gradients(model, batch, weights).unwrap().1
}

fn check_groups(model: &ModelSnapshot, weights: &[f64]) -> Vec<(String, f64)> {
    let batch = batch();
    let (analytic, _) = gradients(model, &batch, weights).unwrap();
    let mut probe = model.clone();
    let mut report = Vec::new();
    for entry in model.layout().entries {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in entry.range() {
            let orig = probe.params[j];
            probe.params[j] = orig + H;
            let up = loss_at(&probe, &batch, weights);
            probe.params[j] = orig - H;
            let down = loss_at(&probe, &batch, weights);
            probe.params[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            diff2 += (numeric - analytic[j]).powi(2);
            a2 += analytic[j].powi(2);
            n2 += numeric.powi(2);
        }
        // Key biases shift every score in a softmax row equally, so their
        // true gradient is zero; compare absolute noise for vanishing groups.
        let scale = a2.sqrt().max(n2.sqrt());
        let rel = if scale < 1e-8 {
            diff2.sqrt()
        } else {
            diff2.sqrt() / (a2.sqrt() + n2.sqrt())
        };
        report.push((entry.name.clone(), rel));
    }
    report
}

fn assert_all_groups_pass(report: &[(String, f64)]) {
    let failures: Vec<_> = report.iter().filter(|(_, r)| !(*r < TOL)).collect();
    assert!(failures.is_empty(), "gradient check failures: {failures:?}");
}

#[test]
fn transformer_gradients_match_finite_differences() {
    let cfg = config(LearnerKind::Transformer);
    let model = init_weights(InitStrategy::Random, &InitContext::new(&cfg, 21)).unwrap();
    assert_all_groups_pass(&check_groups(&model, &[1.0; 4]));
}

#[test]
fn key_bias_gradient_vanishes() {
    let cfg = config(LearnerKind::Transformer);
    let model = init_weights(InitStrategy::Random, &InitContext::new(&cfg, 23)).unwrap();
    let (g, _) = gradients(&model, &batch(), &[1.0; 4]).unwrap();
    for l in 0..cfg.n_layers {
        let r = model.layout().range(&format!("layer{l}.key.bias"));
        assert!(g[r].iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn transformer_gradients_with_non_unit_weights() {
    let cfg = config(LearnerKind::Transformer);
    let model = init_weights(InitStrategy::Random, &InitContext::new(&cfg, 22)).unwrap();
    let report = check_groups(&model, &[0.25, 3.0, 1.7, 0.01]);
    assert_eq!(report.len(), model.layout().entries.len());
    assert_all_groups_pass(&report);
}

#[test]
fn softmax_regression_gradients_match_finite_differences() {
    let cfg = config(LearnerKind::SoftmaxRegression);
    let mut model = ModelSnapshot::zeros(cfg).unwrap();
    for (i, p) in model.params.iter_mut().enumerate() {
        *p = ((i * 37 % 11) as f64 - 5.0) * 0.1;
    }
    assert_all_groups_pass(&check_groups(&model, &[2.0, 0.5, 1.0, 4.0]));
}

// ---------------------------------------------------------------------------
// Independent forward pass: nested row vectors, parameters looked up by name.

type Mat = Vec<Vec<f64>>;

struct Params<'a> {
    model: &'a ModelSnapshot,
}

impl Params<'_> {
    fn mat(&self, name: &str) -> Mat {
        let e = self.model.layout().get(name).cloned().unwrap();
        let (r, c) = (e.shape[0], e.shape[1]);
        (0..r)
            .map(|i| self.model.params[e.offset + i * c..e.offset + (i + 1) * c].to_vec())
            .collect()
    }
    fn vec(&self, name: &str) -> Vec<f64> {
        self.model.params[self.model.layout().range(name)].to_vec()
    }
}

fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + (0..row.len()).map(|i| row[i] * w[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(c, v)| g[c] * (v - mu) / (var + 1e-12).sqrt() + b[c])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn reference_forward(model: &ModelSnapshot, ex: &EncodedExample) -> Vec<f64> {
    let cfg = &model.config;
    let p = Params { model };
    let (tok, pos, seg) = (
        p.mat("embed.token"),
        p.mat("embed.position"),
        p.mat("embed.segment"),
    );
    let x: Mat = ex
        .token_ids
        .iter()
        .zip(&ex.segment_ids)
        .enumerate()
        .map(|(i, (&t, &s))| {
            (0..cfg.d_model)
                .map(|c| tok[t as usize][c] + pos[i][c] + seg[s as usize][c])
                .collect()
        })
        .collect();
    let mut h = norm(&x, &p.vec("embed.ln.gamma"), &p.vec("embed.ln.beta"));
    let dh = cfg.d_model / cfg.n_heads;
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("layer{l}.{s}");
        let proj = |s: &str| {
            linear(
                &h,
                &p.mat(&name(&format!("{s}.weight"))),
                &p.vec(&name(&format!("{s}.bias"))),
            )
        };
        let (q, k, v) = (proj("query"), proj("key"), proj("value"));
        let n = h.len();
        let mut ctx = vec![vec![0.0; cfg.d_model]; n];
        for head in 0..cfg.n_heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh)
                            .map(|c| q[i][head * dh + c] * k[j][head * dh + c])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let a = softmax(&scores);
                for c in 0..dh {
                    ctx[i][head * dh + c] = (0..n).map(|j| a[j] * v[j][head * dh + c]).sum();
                }
            }
        }
        let attn = linear(
            &ctx,
            &p.mat(&name("attn_out.weight")),
            &p.vec(&name("attn_out.bias")),
        );
        let h1 = norm(
            &add(&h, &attn),
            &p.vec(&name("ln1.gamma")),
            &p.vec(&name("ln1.beta")),
        );
        let inner = linear(
            &h1,
            &p.mat(&name("ffn_in.weight")),
            &p.vec(&name("ffn_in.bias")),
        );
        let act: Mat = inner
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&a| {
                        0.5 * a
                            * (1.0
                                + ((2.0 / std::f64::consts::PI).sqrt()
                                    * (a + 0.044715 * a.powi(3)))
                                .tanh())
                    })
                    .collect()
            })
            .collect();
        let out = linear(
            &act,
            &p.mat(&name("ffn_out.weight")),
            &p.vec(&name("ffn_out.bias")),
        );
        h = norm(
            &add(&h1, &out),
            &p.vec(&name("ln2.gamma")),
            &p.vec(&name("ln2.beta")),
        );
    }
    let pooled: Vec<f64> = linear(
        &vec![h[0].clone()],
        &p.mat("pooler.weight"),
        &p.vec("pooler.bias"),
    )[0]
    .iter()
    .map(|v| v.tanh())
    .collect();
    let logits = linear(&vec![pooled], &p.mat("cls.weight"), &p.vec("cls.bias"));
    softmax(&logits[0])
}

#[test]
fn forward_matches_independent_reimplementation() {
    let cfg = config(LearnerKind::Transformer);
    let model = init_weights(InitStrategy::Random, &InitContext::new(&cfg, 5)).unwrap();
    let examples: Vec<EncodedExample> = (0..30)
        .map(|i| example(&[5 + (i % 9) as u32], None, i % 3))
        .collect();
    let data = LabeledDataset::new(examples, vec!["a".into(), "b".into(), "c".into()]).unwrap();
    let opts = TrainOptions {
        batch_size: 6,
        epochs: 4,
        ..Default::default()
    };
    let trained = train(model, &data, &opts, 3).unwrap().model;

    let single = example(&[9], None, 0);
    let ours = predict_proba(&trained, std::slice::from_ref(&single)).unwrap();
    let theirs = reference_forward(&trained, &single);
    for (a, b) in ours[0].iter().zip(&theirs) {
        assert!((a - b).abs() < 1e-10, "{ours:?} vs {theirs:?}");
    }
    let pair = example(&[5, 6], Some(&[7, 8, 9]), 1);
    let ours = predict_proba(&trained, std::slice::from_ref(&pair)).unwrap();
    let theirs = reference_forward(&trained, &pair);
    for (a, b) in ours[0].iter().zip(&theirs) {
        assert!((a - b).abs() < 1e-10);
    }
}
