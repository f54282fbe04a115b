//! Post-LN transformer encoder with CLS pooling, forward and hand-written
//! backward passes. One example is processed at a time, so no padding or
//! attention mask is needed.

use std::ops::Range;

use rand::Rng;

use super::config::{EncoderConfig, ParamLayout};
use super::math::{
    affine, affine_grad_input, affine_grad_params, dot, gelu, gelu_grad, layer_norm,
    layer_norm_backward, softmax_in_place, LayerNormCache,
};
use crate::error::{Error, Result};

struct LayerIndex {
    wq: Range<usize>,
    bq: Range<usize>,
    wk: Range<usize>,
    bk: Range<usize>,
    wv: Range<usize>,
    bv: Range<usize>,
    wo: Range<usize>,
    bo: Range<usize>,
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
}

pub(crate) struct Index {
    tok: Range<usize>,
    pos: Range<usize>,
    seg: Range<usize>,
    emb_g: Range<usize>,
    emb_b: Range<usize>,
    layers: Vec<LayerIndex>,
    pool_w: Range<usize>,
    pool_b: Range<usize>,
    cls_w: Range<usize>,
    cls_b: Range<usize>,
}

impl Index {
    pub(crate) fn new(cfg: &EncoderConfig, layout: &ParamLayout) -> Self {
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let r = |s: &str| layout.range(&format!("layer{i}.{s}"));
                LayerIndex {
                    wq: r("query.weight"),
                    bq: r("query.bias"),
                    wk: r("key.weight"),
                    bk: r("key.bias"),
                    wv: r("value.weight"),
                    bv: r("value.bias"),
                    wo: r("attn_out.weight"),
                    bo: r("attn_out.bias"),
                    ln1_g: r("ln1.gamma"),
                    ln1_b: r("ln1.beta"),
                    w1: r("ffn_in.weight"),
                    b1: r("ffn_in.bias"),
                    w2: r("ffn_out.weight"),
                    b2: r("ffn_out.bias"),
                    ln2_g: r("ln2.gamma"),
                    ln2_b: r("ln2.beta"),
                }
            })
            .collect();
        Index {
            tok: layout.range("embed.token"),
            pos: layout.range("embed.position"),
            seg: layout.range("embed.segment"),
            emb_g: layout.range("embed.ln.gamma"),
            emb_b: layout.range("embed.ln.beta"),
            layers,
            pool_w: layout.range("pooler.weight"),
            pool_b: layout.range("pooler.bias"),
            cls_w: layout.range("cls.weight"),
            cls_b: layout.range("cls.bias"),
        }
    }
}

struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    ctx: Vec<f64>,
    attn_mask: Option<Vec<f64>>,
    ln1: LayerNormCache,
    h1: Vec<f64>,
    ffn_pre: Vec<f64>,
    ffn_act: Vec<f64>,
    ffn_mask: Option<Vec<f64>>,
    ln2: LayerNormCache,
}

pub(crate) struct Cache {
    len: usize,
    emb_ln: LayerNormCache,
    emb_mask: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    /// Final hidden states, `len x d_model`.
    pub hidden: Vec<f64>,
    pooled: Vec<f64>,
}

fn dropout<R: Rng>(x: &mut [f64], rate: f64, rng: Option<&mut R>) -> Option<Vec<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = x
        .iter()
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                scale
            }
        })
        .collect();
    for (v, m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

fn check_finite(x: &[f64], location: impl FnOnce() -> String) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            location: location(),
        })
    }
}

/// Runs the encoder stack and returns the cache with final hidden states.
pub(crate) fn encode<R: Rng>(
    cfg: &EncoderConfig,
    idx: &Index,
    p: &[f64],
    tokens: &[u32],
    segments: &[u8],
    mut rng: Option<&mut R>,
) -> Result<Cache> {
    let d = cfg.d_model;
    let len = tokens.len();
    if len == 0 || len > cfg.max_seq_len {
        return Err(Error::Shape(format!(
            "sequence length {len} outside 1..={}",
            cfg.max_seq_len
        )));
    }
    let mut x = vec![0.0; len * d];
    for (i, (&t, &s)) in tokens.iter().zip(segments).enumerate() {
        let t = t as usize;
        if t >= cfg.vocab_size {
            return Err(Error::Shape(format!(
                "token id {t} >= vocab size {}",
                cfg.vocab_size
            )));
        }
        let tok = &p[idx.tok.start + t * d..idx.tok.start + (t + 1) * d];
        let pos = &p[idx.pos.start + i * d..idx.pos.start + (i + 1) * d];
        let seg = &p[idx.seg.start + s as usize * d..idx.seg.start + (s as usize + 1) * d];
        for c in 0..d {
            x[i * d + c] = tok[c] + pos[c] + seg[c];
        }
    }
    let (mut h, emb_ln) = layer_norm(&x, len, d, &p[idx.emb_g.clone()], &p[idx.emb_b.clone()]);
    let emb_mask = dropout(&mut h, cfg.dropout_rate, rng.as_deref_mut());
    check_finite(&h, || "embeddings".into())?;

    let heads = cfg.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, l) in idx.layers.iter().enumerate() {
        let q = affine(&h, len, d, &p[l.wq.clone()], &p[l.bq.clone()], d);
        let k = affine(&h, len, d, &p[l.wk.clone()], &p[l.bk.clone()], d);
        let v = affine(&h, len, d, &p[l.wv.clone()], &p[l.bv.clone()], d);
        let mut attn = vec![0.0; heads * len * len];
        let mut ctx = vec![0.0; len * d];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..len {
                let row = &mut attn[(hd * len + i) * len..(hd * len + i + 1) * len];
                let qi = &q[i * d + cols.start..i * d + cols.end];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &k[j * d + cols.start..j * d + cols.end]) * scale;
                }
                softmax_in_place(row);
                let out = &mut ctx[i * d + cols.start..i * d + cols.end];
                for (j, &a) in row.iter().enumerate() {
                    for (o, &vv) in out.iter_mut().zip(&v[j * d + cols.start..j * d + cols.end]) {
                        *o += a * vv;
                    }
                }
            }
        }
        let mut attn_out = affine(&ctx, len, d, &p[l.wo.clone()], &p[l.bo.clone()], d);
        let attn_mask = dropout(&mut attn_out, cfg.dropout_rate, rng.as_deref_mut());
        let resid: Vec<f64> = h.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
        let (h1, ln1) = layer_norm(&resid, len, d, &p[l.ln1_g.clone()], &p[l.ln1_b.clone()]);

        let ffn_pre = affine(&h1, len, d, &p[l.w1.clone()], &p[l.b1.clone()], cfg.d_ffn);
        let ffn_act: Vec<f64> = ffn_pre.iter().map(|&a| gelu(a)).collect();
        let mut ffn_out = affine(
            &ffn_act,
            len,
            cfg.d_ffn,
            &p[l.w2.clone()],
            &p[l.b2.clone()],
            d,
        );
        let ffn_mask = dropout(&mut ffn_out, cfg.dropout_rate, rng.as_deref_mut());
        let resid: Vec<f64> = h1.iter().zip(&ffn_out).map(|(a, b)| a + b).collect();
        let (out, ln2) = layer_norm(&resid, len, d, &p[l.ln2_g.clone()], &p[l.ln2_b.clone()]);
        check_finite(&out, || format!("layer {li}"))?;

        layers.push(LayerCache {
            input: std::mem::replace(&mut h, out),
            q,
            k,
            v,
            attn,
            ctx,
            attn_mask,
            ln1,
            h1,
            ffn_pre,
            ffn_act,
            ffn_mask,
            ln2,
        });
    }
    Ok(Cache {
        len,
        emb_ln,
        emb_mask,
        layers,
        hidden: h,
        pooled: Vec::new(),
    })
}

/// Classification logits from the CLS position. Stores the pooled vector in
/// the cache for the backward pass.
pub(crate) fn classify(cfg: &EncoderConfig, idx: &Index, p: &[f64], cache: &mut Cache) -> Vec<f64> {
    let d = cfg.d_model;
    let mut pooled = affine(
        &cache.hidden[..d],
        1,
        d,
        &p[idx.pool_w.clone()],
        &p[idx.pool_b.clone()],
        d,
    );
    for v in pooled.iter_mut() {
        *v = v.tanh();
    }
    let logits = affine(
        &pooled,
        1,
        d,
        &p[idx.cls_w.clone()],
        &p[idx.cls_b.clone()],
        cfg.num_classes,
    );
    cache.pooled = pooled;
    logits
}

/// Backward through the pooler and head; returns gradient w.r.t. the final
/// hidden states.
pub(crate) fn classify_backward(
    cfg: &EncoderConfig,
    idx: &Index,
    p: &[f64],
    cache: &Cache,
    dlogits: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let d = cfg.d_model;
    let k = cfg.num_classes;
    let (gw, gb) = split_pair(grad, &idx.cls_w, &idx.cls_b);
    affine_grad_params(&cache.pooled, 1, d, dlogits, k, gw, gb);
    let mut dpooled = vec![0.0; d];
    affine_grad_input(dlogits, 1, k, &p[idx.cls_w.clone()], d, &mut dpooled);
    for (g, &y) in dpooled.iter_mut().zip(&cache.pooled) {
        *g *= 1.0 - y * y;
    }
    let (gw, gb) = split_pair(grad, &idx.pool_w, &idx.pool_b);
    affine_grad_params(&cache.hidden[..d], 1, d, &dpooled, d, gw, gb);
    let mut dh = vec![0.0; cache.len * d];
    affine_grad_input(&dpooled, 1, d, &p[idx.pool_w.clone()], d, &mut dh[..d]);
    dh
}

/// Backward through the encoder stack given `dL/dhidden`.
pub(crate) fn encode_backward(
    cfg: &EncoderConfig,
    idx: &Index,
    p: &[f64],
    tokens: &[u32],
    segments: &[u8],
    cache: &Cache,
    mut dh: Vec<f64>,
    grad: &mut [f64],
) {
    let d = cfg.d_model;
    let len = cache.len;
    let heads = cfg.n_heads;
    let dh_size = d / heads;
    let scale = 1.0 / (dh_size as f64).sqrt();

    for (l, c) in idx.layers.iter().zip(&cache.layers).rev() {
        // out = LN2(h1 + drop(ffn))
        let (gg, gb) = split_pair(grad, &l.ln2_g, &l.ln2_b);
        let dresid = layer_norm_backward(&dh, len, d, &p[l.ln2_g.clone()], &c.ln2, gg, gb);
        let mut dh1 = dresid.clone();
        let mut dffn_out = dresid;
        apply_mask(&mut dffn_out, c.ffn_mask.as_deref());
        let (gw, gb) = split_pair(grad, &l.w2, &l.b2);
        affine_grad_params(&c.ffn_act, len, cfg.d_ffn, &dffn_out, d, gw, gb);
        let mut dact = vec![0.0; len * cfg.d_ffn];
        affine_grad_input(&dffn_out, len, d, &p[l.w2.clone()], cfg.d_ffn, &mut dact);
        for (g, &a) in dact.iter_mut().zip(&c.ffn_pre) {
            *g *= gelu_grad(a);
        }
        let (gw, gb) = split_pair(grad, &l.w1, &l.b1);
        affine_grad_params(&c.h1, len, d, &dact, cfg.d_ffn, gw, gb);
        affine_grad_input(&dact, len, cfg.d_ffn, &p[l.w1.clone()], d, &mut dh1);

        // h1 = LN1(input + drop(attn_out))
        let (gg, gb) = split_pair(grad, &l.ln1_g, &l.ln1_b);
        let dresid = layer_norm_backward(&dh1, len, d, &p[l.ln1_g.clone()], &c.ln1, gg, gb);
        let mut dinput = dresid.clone();
        let mut dattn_out = dresid;
        apply_mask(&mut dattn_out, c.attn_mask.as_deref());
        let (gw, gb) = split_pair(grad, &l.wo, &l.bo);
        affine_grad_params(&c.ctx, len, d, &dattn_out, d, gw, gb);
        let mut dctx = vec![0.0; len * d];
        affine_grad_input(&dattn_out, len, d, &p[l.wo.clone()], d, &mut dctx);

        let mut dq = vec![0.0; len * d];
        let mut dk = vec![0.0; len * d];
        let mut dv = vec![0.0; len * d];
        let mut da = vec![0.0; len];
        for hd in 0..heads {
            let cols = hd * dh_size..(hd + 1) * dh_size;
            for i in 0..len {
                let a = &c.attn[(hd * len + i) * len..(hd * len + i + 1) * len];
                let dctx_i = &dctx[i * d + cols.start..i * d + cols.end];
                for j in 0..len {
                    da[j] = dot(dctx_i, &c.v[j * d + cols.start..j * d + cols.end]);
                    for (g, &x) in dv[j * d + cols.start..j * d + cols.end]
                        .iter_mut()
                        .zip(dctx_i)
                    {
                        *g += a[j] * x;
                    }
                }
                let inner = dot(&da, a);
                for j in 0..len {
                    let ds = a[j] * (da[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for col in cols.clone() {
                        dq[i * d + col] += ds * c.k[j * d + col];
                        dk[j * d + col] += ds * c.q[i * d + col];
                    }
                }
            }
        }
        for (dy, w, b) in [
            (&dq, &l.wq, &l.bq),
            (&dk, &l.wk, &l.bk),
            (&dv, &l.wv, &l.bv),
        ] {
            let (gw, gb) = split_pair(grad, w, b);
            affine_grad_params(&c.input, len, d, dy, d, gw, gb);
            affine_grad_input(dy, len, d, &p[w.clone()], d, &mut dinput);
        }
        dh = dinput;
    }

    apply_mask(&mut dh, cache.emb_mask.as_deref());
    let (gg, gb) = split_pair(grad, &idx.emb_g, &idx.emb_b);
    let dx = layer_norm_backward(&dh, len, d, &p[idx.emb_g.clone()], &cache.emb_ln, gg, gb);
    for (i, (&t, &s)) in tokens.iter().zip(segments).enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        for (start, r) in [
            (idx.tok.start, t as usize),
            (idx.pos.start, i),
            (idx.seg.start, s as usize),
        ] {
            for (g, &x) in grad[start + r * d..start + (r + 1) * d].iter_mut().zip(row) {
                *g += x;
            }
        }
    }
}

fn apply_mask(x: &mut [f64], mask: Option<&[f64]>) {
    if let Some(m) = mask {
        for (v, s) in x.iter_mut().zip(m) {
            *v *= s;
        }
    }
}

/// Two disjoint mutable views into the gradient vector; `a` must precede `b`.
fn split_pair<'g>(
    grad: &'g mut [f64],
    a: &Range<usize>,
    b: &Range<usize>,
) -> (&'g mut [f64], &'g mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = grad.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}
