//! Masked-pooling proposition encoder.
//!
//! A sentence is run once through a small pre-layer-norm transformer with
//! full bidirectional attention. Each proposition mask then mean-pools the
//! contextual token vectors it selects, and a `linear → tanh → linear`
//! projection followed by L2 normalization yields the proposition embedding.
//! Propositions never attend to each other, so embeddings do not depend on
//! which other masks are encoded alongside.

mod checkpoint;
mod head;
mod params;
mod transformer;

use serde::{Deserialize, Serialize};

use crate::alignment::BinaryMask;
use crate::error::{Error, Result};
use crate::numerics::{dot, Tensor};
use crate::tokenizer::{TokenizedText, Vocab};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use head::{masked_mean_pool, project, ProjectionCache};
pub use params::{EncoderParams, LayerParams};
pub use transformer::{encode_tokens, EncodeCache};

/// How propositions are pooled out of a sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingStrategy {
    /// One full-sentence pass; each mask pools from the shared token vectors.
    #[default]
    MaskPoolingOnly,
    /// One pass per mask, with the mask also restricting which keys attention sees.
    FullMask,
    /// One pass per mask over only the masked tokens, as a new sequence.
    TokenSubsetOnly,
}

impl PoolingStrategy {
    pub fn code(self) -> u32 {
        match self {
            PoolingStrategy::MaskPoolingOnly => 0,
            PoolingStrategy::FullMask => 1,
            PoolingStrategy::TokenSubsetOnly => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(PoolingStrategy::MaskPoolingOnly),
            1 => Ok(PoolingStrategy::FullMask),
            2 => Ok(PoolingStrategy::TokenSubsetOnly),
            other => Err(Error::Format(format!("unknown pooling strategy code {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Zero means "take it from the training vocabulary".
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub d_out: usize,
    pub pooling: PoolingStrategy,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            ffn_mult: 4,
            max_len: 64,
            d_out: 64,
            pooling: PoolingStrategy::MaskPoolingOnly,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.ffn_mult == 0 || self.max_len == 0 || self.d_out == 0 {
            return bad("ffn_mult, max_len and d_out must be >= 1".into());
        }
        if !(self.init_std > 0.0) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

/// Unit-norm proposition vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PropositionEmbedding {
    vector: Vec<f64>,
}

impl PropositionEmbedding {
    /// Normalizes `raw` to unit length. A zero vector is an error.
    pub fn normalize(raw: &[f64]) -> Result<Self> {
        let norm = dot(raw, raw).sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("embedding".into()));
        }
        if norm == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(Self {
            vector: raw.iter().map(|v| v / norm).collect(),
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn cosine(&self, other: &PropositionEmbedding) -> f64 {
        dot(&self.vector, &other.vector)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.vector.iter().map(|&v| v as f32).collect()
    }
}

/// Counts passes through the transformer stack.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    pub encoder_passes: usize,
    pub projections: usize,
}

struct PropForward {
    encode: usize,
    pool_mask: BinaryMask,
    proj: ProjectionCache,
}

/// Forward state for all propositions of one sentence, kept for backprop.
pub struct SentenceForward {
    encodes: Vec<(Tensor, EncodeCache)>,
    props: Vec<PropForward>,
    trace: ForwardTrace,
}

impl SentenceForward {
    pub fn run(params: &EncoderParams, token_ids: &[usize], masks: &[BinaryMask]) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::InvalidArgument("need at least one mask".into()));
        }
        for m in masks {
            m.validate_for(token_ids.len())?;
        }
        let mut encodes = Vec::new();
        let mut props = Vec::with_capacity(masks.len());
        let mut trace = ForwardTrace::default();
        match params.config.pooling {
            PoolingStrategy::MaskPoolingOnly => {
                encodes.push(transformer::forward(params, token_ids, None)?);
                trace.encoder_passes += 1;
                for m in masks {
                    let proj = head::forward(params, &encodes[0].0, m)?;
                    props.push(PropForward {
                        encode: 0,
                        pool_mask: m.clone(),
                        proj,
                    });
                }
            }
            PoolingStrategy::FullMask => {
                for m in masks {
                    let enc = transformer::forward(params, token_ids, Some(m))?;
                    trace.encoder_passes += 1;
                    let proj = head::forward(params, &enc.0, m)?;
                    props.push(PropForward {
                        encode: encodes.len(),
                        pool_mask: m.clone(),
                        proj,
                    });
                    encodes.push(enc);
                }
            }
            PoolingStrategy::TokenSubsetOnly => {
                for m in masks {
                    let subset: Vec<usize> = m.set_indices().map(|i| token_ids[i]).collect();
                    let all = BinaryMask::ones(subset.len());
                    let enc = transformer::forward(params, &subset, None)?;
                    trace.encoder_passes += 1;
                    let proj = head::forward(params, &enc.0, &all)?;
                    props.push(PropForward {
                        encode: encodes.len(),
                        pool_mask: all,
                        proj,
                    });
                    encodes.push(enc);
                }
            }
        }
        trace.projections = props.len();
        Ok(Self {
            encodes,
            props,
            trace,
        })
    }

    pub fn trace(&self) -> ForwardTrace {
        self.trace
    }

    pub fn len(&self) -> usize {
        self.props.len()
    }

    pub fn is_empty(&self) -> bool {
        self.props.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        self.props[i].proj.output()
    }

    pub fn embeddings(&self) -> Vec<PropositionEmbedding> {
        self.props
            .iter()
            .map(|p| PropositionEmbedding {
                vector: p.proj.output().to_vec(),
            })
            .collect()
    }

    /// Accumulates parameter gradients given `d_embeddings[i] = dL/dv_i`.
    pub fn backward(
        &self,
        params: &EncoderParams,
        d_embeddings: &[&[f64]],
        grads: &mut EncoderParams,
    ) -> Result<()> {
        if d_embeddings.len() != self.props.len() {
            return Err(Error::Shape(format!(
                "{} upstream gradients for {} propositions",
                d_embeddings.len(),
                self.props.len()
            )));
        }
        let mut d_tokens: Vec<Tensor> = self
            .encodes
            .iter()
            .map(|(y, _)| Tensor::zeros(y.shape()))
            .collect();
        for (p, dv) in self.props.iter().zip(d_embeddings) {
            head::backward(params, &p.proj, &p.pool_mask, dv, &mut d_tokens[p.encode], grads)?;
        }
        for ((_, cache), dy) in self.encodes.iter().zip(&d_tokens) {
            transformer::backward(params, cache, dy, grads)?;
        }
        Ok(())
    }
}

/// Embeds every mask over the sentence `token_ids`.
pub fn encode_propositions(
    params: &EncoderParams,
    token_ids: &[usize],
    masks: &[BinaryMask],
) -> Result<Vec<PropositionEmbedding>> {
    encode_propositions_traced(params, token_ids, masks).map(|(e, _)| e)
}

pub fn encode_propositions_traced(
    params: &EncoderParams,
    token_ids: &[usize],
    masks: &[BinaryMask],
) -> Result<(Vec<PropositionEmbedding>, ForwardTrace)> {
    let fwd = SentenceForward::run(params, token_ids, masks)?;
    Ok((fwd.embeddings(), fwd.trace()))
}

/// Parameters plus the vocabulary that maps text to token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: EncoderParams,
    pub vocab: Vocab,
}

impl Model {
    pub fn token_ids(&self, sentence: &TokenizedText) -> Vec<usize> {
        self.vocab.encode(sentence)
    }

    pub fn embed(
        &self,
        sentence: &TokenizedText,
        masks: &[BinaryMask],
    ) -> Result<Vec<PropositionEmbedding>> {
        encode_propositions(&self.params, &self.token_ids(sentence), masks)
    }
}
