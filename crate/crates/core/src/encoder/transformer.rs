//! Pre-layer-norm transformer stack with learned positions, plus its backward pass.

use super::params::{EncoderParams, LayerParams};
use crate::alignment::BinaryMask;
use crate::error::{Error, Result};
use crate::numerics::{
    accumulate_col_sums, add_row_bias, dot, gelu, gelu_grad, layer_norm, layer_norm_backward,
    matmul, matmul_at, matmul_bt, softmax_in_place, Tensor, LAYER_NORM_EPS,
};

struct LayerCache {
    x_in: Tensor,
    a: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// One `n × n` attention matrix per head.
    probs: Vec<Tensor>,
    ctx: Tensor,
    h1: Tensor,
    c: Tensor,
    u: Tensor,
    g: Tensor,
}

/// Activations retained from a forward pass.
pub struct EncodeCache {
    ids: Vec<usize>,
    layers: Vec<LayerCache>,
    x_last: Tensor,
}

fn check_ids(params: &EncoderParams, ids: &[usize]) -> Result<()> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if ids.len() > cfg.max_len {
        return Err(Error::Overlong {
            len: ids.len(),
            max_len: cfg.max_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::UnknownTokenId {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Contextual token vectors (`len × d_model`) for a sentence.
pub fn encode_tokens(params: &EncoderParams, token_ids: &[usize]) -> Result<Tensor> {
    forward(params, token_ids, None).map(|(y, _)| y)
}

/// Runs the stack. With `attend`, attention only reaches keys whose bit is set.
pub(crate) fn forward(
    params: &EncoderParams,
    ids: &[usize],
    attend: Option<&BinaryMask>,
) -> Result<(Tensor, EncodeCache)> {
    check_ids(params, ids)?;
    let d = params.config.d_model;
    let n = ids.len();
    let mut x = Tensor::zeros(&[n, d]);
    for (t, &id) in ids.iter().enumerate() {
        let tok = params.token_emb.row(id);
        let pos = params.pos_emb.row(t);
        for ((o, a), b) in x.row_mut(t).iter_mut().zip(tok).zip(pos) {
            *o = a + b;
        }
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, cache) = layer_forward(params, layer, x, attend)?;
        layers.push(cache);
        x = next;
    }
    let y = layer_norm(&x, &params.final_ln_gain, &params.final_ln_bias, LAYER_NORM_EPS)?;
    if !y.is_finite() {
        return Err(Error::NonFinite("encoder output".into()));
    }
    Ok((
        y,
        EncodeCache {
            ids: ids.to_vec(),
            layers,
            x_last: x,
        },
    ))
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = matmul(x, w)?;
    add_row_bias(&mut out, b)?;
    Ok(out)
}

fn layer_forward(
    params: &EncoderParams,
    p: &LayerParams,
    x: Tensor,
    attend: Option<&BinaryMask>,
) -> Result<(Tensor, LayerCache)> {
    let cfg = &params.config;
    let (n, dh) = (x.rows(), cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    let a = layer_norm(&x, &p.ln1_gain, &p.ln1_bias, LAYER_NORM_EPS)?;
    let q = linear(&a, &p.wq, &p.bq)?;
    let k = linear(&a, &p.wk, &p.bk)?;
    let v = linear(&a, &p.wv, &p.bv)?;

    let mut ctx = Tensor::zeros(&[n, cfg.d_model]);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut s = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            for j in 0..n {
                let allowed = attend.is_none_or(|m| m.is_set(j));
                s.row_mut(i)[j] = if allowed {
                    dot(qi, &k.row(j)[cols.clone()]) * scale
                } else {
                    f64::NEG_INFINITY
                };
            }
            softmax_in_place(s.row_mut(i));
        }
        for i in 0..n {
            for j in 0..n {
                let pij = s.row(i)[j];
                if pij == 0.0 {
                    continue;
                }
                let vj = &v.row(j)[cols.clone()];
                for (c, vv) in ctx.row_mut(i)[cols.clone()].iter_mut().zip(vj) {
                    *c += pij * vv;
                }
            }
        }
        probs.push(s);
    }

    let mut h1 = linear(&ctx, &p.wo, &p.bo)?;
    h1.add_assign(&x)?;
    let c = layer_norm(&h1, &p.ln2_gain, &p.ln2_bias, LAYER_NORM_EPS)?;
    let u = linear(&c, &p.ffn_w1, &p.ffn_b1)?;
    let mut g = u.clone();
    g.data_mut().iter_mut().for_each(|z| *z = gelu(*z));
    let mut out = linear(&g, &p.ffn_w2, &p.ffn_b2)?;
    out.add_assign(&h1)?;

    Ok((
        out,
        LayerCache {
            x_in: x,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            h1,
            c,
            u,
            g,
        },
    ))
}

/// Accumulates parameter gradients given `dy = dL/d(encoder output)`.
pub(crate) fn backward(
    params: &EncoderParams,
    cache: &EncodeCache,
    dy: &Tensor,
    grads: &mut EncoderParams,
) -> Result<()> {
    let mut dx = layer_norm_backward(
        &cache.x_last,
        &params.final_ln_gain,
        LAYER_NORM_EPS,
        dy,
        &mut grads.final_ln_gain,
        &mut grads.final_ln_bias,
    )?;
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        dx = layer_backward(params, &params.layers[l], lc, &dx, &mut grads.layers[l])?;
    }
    for (t, &id) in cache.ids.iter().enumerate() {
        let row = dx.row(t);
        for (g, d) in grads.token_emb.row_mut(id).iter_mut().zip(row) {
            *g += d;
        }
        for (g, d) in grads.pos_emb.row_mut(t).iter_mut().zip(row) {
            *g += d;
        }
    }
    Ok(())
}

/// `out = x·w + b` backward: accumulates dw, db and returns dx.
fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Result<Tensor> {
    dw.add_assign(&matmul_at(x, dout)?)?;
    accumulate_col_sums(db, dout);
    matmul_bt(dout, w)
}

fn layer_backward(
    params: &EncoderParams,
    p: &LayerParams,
    lc: &LayerCache,
    dout: &Tensor,
    g: &mut LayerParams,
) -> Result<Tensor> {
    let cfg = &params.config;
    let (n, dh) = (lc.x_in.rows(), cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    // out = h1 + ffn(ln2(h1))
    let mut dgact = linear_backward(&lc.g, &p.ffn_w2, dout, &mut g.ffn_w2, &mut g.ffn_b2)?;
    for (dz, &u) in dgact.data_mut().iter_mut().zip(lc.u.data()) {
        *dz *= gelu_grad(u);
    }
    let dc = linear_backward(&lc.c, &p.ffn_w1, &dgact, &mut g.ffn_w1, &mut g.ffn_b1)?;
    let mut dh1 = layer_norm_backward(
        &lc.h1,
        &p.ln2_gain,
        LAYER_NORM_EPS,
        &dc,
        &mut g.ln2_gain,
        &mut g.ln2_bias,
    )?;
    dh1.add_assign(dout)?;

    // h1 = x + attn(ln1(x))
    let dctx = linear_backward(&lc.ctx, &p.wo, &dh1, &mut g.wo, &mut g.bo)?;
    let mut dq = Tensor::zeros(&[n, cfg.d_model]);
    let mut dk = Tensor::zeros(&[n, cfg.d_model]);
    let mut dv = Tensor::zeros(&[n, cfg.d_model]);
    let mut ds_row = vec![0.0; n];
    for (h, probs) in lc.probs.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let dci = &dctx.row(i)[cols.clone()];
            let pi = probs.row(i);
            // dP_ij = dctx_i · v_j, then softmax backward on row i.
            for j in 0..n {
                ds_row[j] = if pi[j] == 0.0 {
                    0.0
                } else {
                    dot(dci, &lc.v.row(j)[cols.clone()])
                };
            }
            let inner = dot(pi, &ds_row);
            for j in 0..n {
                let pij = pi[j];
                if pij == 0.0 {
                    continue;
                }
                for (d, c) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dci) {
                    *d += pij * c;
                }
                let dsij = pij * (ds_row[j] - inner) * scale;
                if dsij == 0.0 {
                    continue;
                }
                for (d, kk) in dq.row_mut(i)[cols.clone()]
                    .iter_mut()
                    .zip(&lc.k.row(j)[cols.clone()])
                {
                    *d += dsij * kk;
                }
                for (d, qq) in dk.row_mut(j)[cols.clone()]
                    .iter_mut()
                    .zip(&lc.q.row(i)[cols.clone()])
                {
                    *d += dsij * qq;
                }
            }
        }
    }
    let mut da = linear_backward(&lc.a, &p.wq, &dq, &mut g.wq, &mut g.bq)?;
    da.add_assign(&linear_backward(&lc.a, &p.wk, &dk, &mut g.wk, &mut g.bk)?)?;
    da.add_assign(&linear_backward(&lc.a, &p.wv, &dv, &mut g.wv, &mut g.bv)?)?;
    let mut dx = layer_norm_backward(
        &lc.x_in,
        &p.ln1_gain,
        LAYER_NORM_EPS,
        &da,
        &mut g.ln1_gain,
        &mut g.ln1_bias,
    )?;
    dx.add_assign(&dh1)?;
    Ok(dx)
}
