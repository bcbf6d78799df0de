use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamTensors, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

impl LayerParams {
    const NAMES: [&'static str; 16] = [
        "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
        "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
    ];

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv,
            &self.bv, &self.wo, &self.bo, &self.ln2_gain, &self.ln2_bias, &self.ffn_w1,
            &self.ffn_b1, &self.ffn_w2, &self.ffn_b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_gain, &mut self.ln2_bias, &mut self.ffn_w1, &mut self.ffn_b1,
            &mut self.ffn_w2, &mut self.ffn_b2,
        ]
    }
}

/// All trainable weights of the encoder and its projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
    pub proj_w1: Tensor,
    pub proj_b1: Tensor,
    pub proj_w2: Tensor,
    pub proj_b2: Tensor,
}

impl EncoderParams {
    /// Random initialization: N(0, init_std) for weight matrices and
    /// embeddings, zero biases, unit layer-norm gains.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut randn = |shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches data")
        };
        let (d, ff) = (config.d_model, config.ffn_dim());
        let token_emb = randn(&[config.vocab_size, d]);
        let pos_emb = randn(&[config.max_len, d]);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::filled(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: randn(&[d, d]),
                bq: Tensor::zeros(&[d]),
                wk: randn(&[d, d]),
                bk: Tensor::zeros(&[d]),
                wv: randn(&[d, d]),
                bv: Tensor::zeros(&[d]),
                wo: randn(&[d, d]),
                bo: Tensor::zeros(&[d]),
                ln2_gain: Tensor::filled(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                ffn_w1: randn(&[d, ff]),
                ffn_b1: Tensor::zeros(&[ff]),
                ffn_w2: randn(&[ff, d]),
                ffn_b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            config,
            token_emb,
            pos_emb,
            layers,
            final_ln_gain: Tensor::filled(&[d], 1.0),
            final_ln_bias: Tensor::zeros(&[d]),
            proj_w1: randn(&[d, d]),
            proj_b1: Tensor::zeros(&[d]),
            proj_w2: randn(&[d, config.d_out]),
            proj_b2: Tensor::zeros(&[config.d_out]),
        })
    }

    /// Tensors with stable names, in [`ParamTensors`] order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_emb".to_string(), &self.token_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerParams::NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.extend([
            ("final_ln.gain".to_string(), &self.final_ln_gain),
            ("final_ln.bias".to_string(), &self.final_ln_bias),
            ("proj.w1".to_string(), &self.proj_w1),
            ("proj.b1".to_string(), &self.proj_b1),
            ("proj.w2".to_string(), &self.proj_w2),
            ("proj.b2".to_string(), &self.proj_b2),
        ]);
        out
    }

    /// Scalar count of the projection head alone.
    pub fn projection_param_count(&self) -> usize {
        self.proj_w1.len() + self.proj_b1.len() + self.proj_w2.len() + self.proj_b2.len()
    }
}

impl ParamTensors for EncoderParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_emb, &self.pos_emb];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([
            &self.final_ln_gain,
            &self.final_ln_bias,
            &self.proj_w1,
            &self.proj_b1,
            &self.proj_w2,
            &self.proj_b2,
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([
            &mut self.final_ln_gain,
            &mut self.final_ln_bias,
            &mut self.proj_w1,
            &mut self.proj_b1,
            &mut self.proj_w2,
            &mut self.proj_b2,
        ]);
        out
    }
}
