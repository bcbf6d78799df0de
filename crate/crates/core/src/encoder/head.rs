use super::params::EncoderParams;
use super::PropositionEmbedding;
use crate::alignment::BinaryMask;
use crate::error::{Error, Result};
use crate::numerics::{dot, Tensor};

/// Mean of the rows of `token_embs` selected by `mask`.
pub fn masked_mean_pool(token_embs: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
    if token_embs.rank() != 2 {
        return Err(Error::Shape("token embeddings must be rank-2".into()));
    }
    mask.validate_for(token_embs.rows())?;
    let mut out = vec![0.0; token_embs.cols()];
    for i in mask.set_indices() {
        for (o, v) in out.iter_mut().zip(token_embs.row(i)) {
            *o += v;
        }
    }
    let count = mask.popcount() as f64;
    out.iter_mut().for_each(|o| *o /= count);
    Ok(Tensor::vector(out))
}

/// Forward state of `linear → tanh → linear → normalize`.
pub struct ProjectionCache {
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    norm: f64,
    output: Vec<f64>,
}

impl ProjectionCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

fn project_cached(params: &EncoderParams, pooled: &[f64]) -> Result<ProjectionCache> {
    let d = params.config.d_model;
    if pooled.len() != d {
        return Err(Error::Shape(format!(
            "pooled vector of length {} for d_model {d}",
            pooled.len()
        )));
    }
    let mut hidden = params.proj_b1.data().to_vec();
    for (k, &x) in pooled.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (h, w) in hidden.iter_mut().zip(params.proj_w1.row(k)) {
            *h += x * w;
        }
    }
    hidden.iter_mut().for_each(|h| *h = h.tanh());
    let mut z = params.proj_b2.data().to_vec();
    for (k, &x) in hidden.iter().enumerate() {
        for (o, w) in z.iter_mut().zip(params.proj_w2.row(k)) {
            *o += x * w;
        }
    }
    let norm = dot(&z, &z).sqrt();
    let output = PropositionEmbedding::normalize(&z)?.into_vec();
    Ok(ProjectionCache {
        pooled: pooled.to_vec(),
        hidden,
        norm,
        output,
    })
}

/// Projection head applied to a pooled vector, L2-normalized.
pub fn project(params: &EncoderParams, pooled: &Tensor) -> Result<PropositionEmbedding> {
    let cache = project_cached(params, pooled.data())?;
    Ok(PropositionEmbedding {
        vector: cache.output,
    })
}

pub(super) fn forward(
    params: &EncoderParams,
    token_embs: &Tensor,
    mask: &BinaryMask,
) -> Result<ProjectionCache> {
    let pooled = masked_mean_pool(token_embs, mask)?;
    project_cached(params, pooled.data())
}

/// Backprop from `dv = dL/d(output)` into the head weights and into the
/// token-embedding gradient `d_tokens`.
pub(super) fn backward(
    params: &EncoderParams,
    cache: &ProjectionCache,
    mask: &BinaryMask,
    dv: &[f64],
    d_tokens: &mut Tensor,
    grads: &mut EncoderParams,
) -> Result<()> {
    let v = &cache.output;
    if dv.len() != v.len() {
        return Err(Error::Shape("embedding gradient length mismatch".into()));
    }
    // v = z / |z|  =>  dz = (dv - v (v·dv)) / |z|
    let vdv = dot(v, dv);
    let dz: Vec<f64> = dv
        .iter()
        .zip(v)
        .map(|(g, vi)| (g - vi * vdv) / cache.norm)
        .collect();

    let mut dhidden = vec![0.0; cache.hidden.len()];
    for (k, (&h, dh)) in cache.hidden.iter().zip(dhidden.iter_mut()).enumerate() {
        let w_row = params.proj_w2.row(k);
        for ((gw, &w), &g) in grads.proj_w2.row_mut(k).iter_mut().zip(w_row).zip(&dz) {
            *gw += h * g;
            *dh += w * g;
        }
    }
    for (gb, g) in grads.proj_b2.data_mut().iter_mut().zip(&dz) {
        *gb += g;
    }
    let du: Vec<f64> = dhidden
        .iter()
        .zip(&cache.hidden)
        .map(|(g, h)| g * (1.0 - h * h))
        .collect();
    let mut dpooled = vec![0.0; cache.pooled.len()];
    for (k, (&x, dp)) in cache.pooled.iter().zip(dpooled.iter_mut()).enumerate() {
        let w_row = params.proj_w1.row(k);
        for ((gw, &w), &g) in grads.proj_w1.row_mut(k).iter_mut().zip(w_row).zip(&du) {
            *gw += x * g;
            *dp += w * g;
        }
    }
    for (gb, g) in grads.proj_b1.data_mut().iter_mut().zip(&du) {
        *gb += g;
    }

    let count = mask.popcount() as f64;
    for i in mask.set_indices() {
        for (d, g) in d_tokens.row_mut(i).iter_mut().zip(&dpooled) {
            *d += g / count;
        }
    }
    Ok(())
}
