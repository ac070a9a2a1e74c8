//! T5-style encoder-decoder. Parameter names follow the Hugging Face layout
//! so converted `model.safetensors` checkpoints load without renaming.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::ops::softmax;
use serde::{Deserialize, Serialize};

use super::params::{Init, ParamStore};
use crate::error::{Error, Result};

const MASK_NEG: f64 = -1e9;

fn default_buckets() -> usize {
    32
}
fn default_max_distance() -> usize {
    128
}
fn default_eps() -> f64 {
    1e-6
}
fn default_ff_proj() -> String {
    "relu".into()
}
fn default_true() -> bool {
    true
}
fn default_eos() -> u32 {
    1
}

/// Subset of the Hugging Face T5 `config.json` fields that shape the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T5Config {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_kv: usize,
    pub d_ff: usize,
    pub num_layers: usize,
    #[serde(default)]
    pub num_decoder_layers: Option<usize>,
    pub num_heads: usize,
    #[serde(default = "default_buckets")]
    pub relative_attention_num_buckets: usize,
    #[serde(default = "default_max_distance")]
    pub relative_attention_max_distance: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_epsilon: f64,
    #[serde(default = "default_ff_proj")]
    pub feed_forward_proj: String,
    #[serde(default = "default_true")]
    pub tie_word_embeddings: bool,
    #[serde(default)]
    pub pad_token_id: u32,
    #[serde(default = "default_eos")]
    pub eos_token_id: u32,
    #[serde(default)]
    pub decoder_start_token_id: u32,
}

impl T5Config {
    /// t5-base dimensions: 12 layers, width 768, feed-forward 3072, 12 heads.
    pub fn t5_base() -> Self {
        T5Config {
            vocab_size: 32128,
            d_model: 768,
            d_kv: 64,
            d_ff: 3072,
            num_layers: 12,
            num_decoder_layers: Some(12),
            num_heads: 12,
            relative_attention_num_buckets: 32,
            relative_attention_max_distance: 128,
            layer_norm_epsilon: 1e-6,
            feed_forward_proj: "relu".into(),
            tie_word_embeddings: true,
            pad_token_id: 0,
            eos_token_id: 1,
            decoder_start_token_id: 0,
        }
    }

    /// Small randomly initialized model for tests and smoke runs.
    pub fn tiny(vocab_size: usize, layers: usize, width: usize) -> Self {
        let heads = 4;
        T5Config {
            vocab_size,
            d_model: width,
            d_kv: width / heads,
            d_ff: width * 2,
            num_layers: layers,
            num_decoder_layers: Some(layers),
            num_heads: heads,
            relative_attention_num_buckets: 32,
            relative_attention_max_distance: 128,
            layer_norm_epsilon: 1e-6,
            feed_forward_proj: "relu".into(),
            tie_word_embeddings: true,
            pad_token_id: 0,
            eos_token_id: 1,
            decoder_start_token_id: 0,
        }
    }

    pub fn decoder_layers(&self) -> usize {
        self.num_decoder_layers.unwrap_or(self.num_layers)
    }

    fn gated(&self) -> bool {
        self.feed_forward_proj.starts_with("gated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_kv == 0 || self.num_heads == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidInput("backbone dimensions must be positive".into()));
        }
        match self.feed_forward_proj.as_str() {
            "relu" | "gated-gelu" => Ok(()),
            other => Err(Error::InvalidInput(format!("unsupported feed_forward_proj {other:?}"))),
        }
    }
}

pub(crate) fn init_params(cfg: &T5Config, init: &mut Init<'_>) -> Result<()> {
    let d = cfg.d_model;
    let inner = cfg.num_heads * cfg.d_kv;
    let df = d as f64;
    init.normal("shared.weight", &[cfg.vocab_size, d], 1.0)?;
    for (stack, layers) in [("encoder", cfg.num_layers), ("decoder", cfg.decoder_layers())] {
        let is_decoder = stack == "decoder";
        for i in 0..layers {
            let block = format!("{stack}.block.{i}.layer");
            let attn = |init: &mut Init<'_>, prefix: String, relative: bool| -> Result<()> {
                init.normal(&format!("{prefix}.q.weight"), &[inner, d], (df * cfg.d_kv as f64).powf(-0.5))?;
                init.normal(&format!("{prefix}.k.weight"), &[inner, d], df.powf(-0.5))?;
                init.normal(&format!("{prefix}.v.weight"), &[inner, d], df.powf(-0.5))?;
                init.normal(&format!("{prefix}.o.weight"), &[d, inner], (inner as f64).powf(-0.5))?;
                if relative {
                    init.normal(
                        &format!("{prefix}.relative_attention_bias.weight"),
                        &[cfg.relative_attention_num_buckets, cfg.num_heads],
                        df.powf(-0.5),
                    )?;
                }
                Ok(())
            };
            attn(init, format!("{block}.0.SelfAttention"), i == 0)?;
            init.ones(&format!("{block}.0.layer_norm.weight"), &[d])?;
            let mut ff_index = 1;
            if is_decoder {
                attn(init, format!("{block}.1.EncDecAttention"), false)?;
                init.ones(&format!("{block}.1.layer_norm.weight"), &[d])?;
                ff_index = 2;
            }
            let ff = format!("{block}.{ff_index}.DenseReluDense");
            if cfg.gated() {
                init.normal(&format!("{ff}.wi_0.weight"), &[cfg.d_ff, d], df.powf(-0.5))?;
                init.normal(&format!("{ff}.wi_1.weight"), &[cfg.d_ff, d], df.powf(-0.5))?;
            } else {
                init.normal(&format!("{ff}.wi.weight"), &[cfg.d_ff, d], df.powf(-0.5))?;
            }
            init.normal(&format!("{ff}.wo.weight"), &[d, cfg.d_ff], (cfg.d_ff as f64).powf(-0.5))?;
            init.ones(&format!("{block}.{ff_index}.layer_norm.weight"), &[d])?;
        }
        init.ones(&format!("{stack}.final_layer_norm.weight"), &[d])?;
    }
    if !cfg.tie_word_embeddings {
        init.normal("lm_head.weight", &[cfg.vocab_size, d], df.powf(-0.5))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Linear {
    weight: Tensor,
}

impl Linear {
    fn load(store: &ParamStore, name: &str, out_dim: usize, in_dim: usize) -> Result<Self> {
        Ok(Linear {
            weight: store.tensor(&format!("{name}.weight"), &[out_dim, in_dim])?,
        })
    }
}

impl Module for Linear {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        xs.broadcast_matmul(&self.weight.t()?)
    }
}

/// Scale-only RMS normalization, no mean subtraction and no bias.
#[derive(Debug, Clone)]
struct RmsNorm {
    weight: Tensor,
    eps: f64,
}

impl RmsNorm {
    fn load(store: &ParamStore, name: &str, d: usize, eps: f64) -> Result<Self> {
        Ok(RmsNorm {
            weight: store.tensor(&format!("{name}.weight"), &[d])?,
            eps,
        })
    }
}

impl Module for RmsNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let variance = xs.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = xs.broadcast_div(&(variance + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    relative_bias: Option<Tensor>,
    num_heads: usize,
    d_kv: usize,
    num_buckets: usize,
    max_distance: usize,
}

impl Attention {
    fn load(store: &ParamStore, prefix: &str, cfg: &T5Config, relative: bool) -> Result<Self> {
        let inner = cfg.num_heads * cfg.d_kv;
        let d = cfg.d_model;
        let relative_bias = if relative {
            Some(store.tensor(
                &format!("{prefix}.relative_attention_bias.weight"),
                &[cfg.relative_attention_num_buckets, cfg.num_heads],
            )?)
        } else {
            None
        };
        Ok(Attention {
            q: Linear::load(store, &format!("{prefix}.q"), inner, d)?,
            k: Linear::load(store, &format!("{prefix}.k"), inner, d)?,
            v: Linear::load(store, &format!("{prefix}.v"), inner, d)?,
            o: Linear::load(store, &format!("{prefix}.o"), d, inner)?,
            relative_bias,
            num_heads: cfg.num_heads,
            d_kv: cfg.d_kv,
            num_buckets: cfg.relative_attention_num_buckets,
            max_distance: cfg.relative_attention_max_distance,
        })
    }

    /// `[1, heads, q_len, k_len]` learned bias from bucketed relative offsets.
    fn position_bias(&self, q_len: usize, k_len: usize, bidirectional: bool, device: &Device) -> Result<Tensor> {
        let table = self
            .relative_bias
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("layer has no relative attention bias".into()))?;
        let buckets: Vec<u32> = (0..q_len)
            .flat_map(|q| {
                (0..k_len).map(move |k| {
                    relative_position_bucket(k as i64 - q as i64, bidirectional, self.num_buckets, self.max_distance)
                })
            })
            .collect();
        let idx = Tensor::from_vec(buckets, q_len * k_len, device)?;
        let bias = table
            .embedding(&idx)?
            .reshape((q_len, k_len, self.num_heads))?
            .permute((2, 0, 1))?
            .unsqueeze(0)?;
        Ok(bias)
    }

    fn forward(&self, xs: &Tensor, kv: Option<&Tensor>, bias: &Tensor) -> Result<Tensor> {
        let (b, q_len, _) = xs.dims3()?;
        let kv = kv.unwrap_or(xs);
        let k_len = kv.dim(1)?;
        let heads = |t: Tensor, len: usize| -> candle_core::Result<Tensor> {
            t.reshape((b, len, self.num_heads, self.d_kv))?.transpose(1, 2)?.contiguous()
        };
        let q = heads(self.q.forward(xs)?, q_len)?;
        let k = heads(self.k.forward(kv)?, k_len)?;
        let v = heads(self.v.forward(kv)?, k_len)?;
        // No 1/sqrt(d_kv) scaling: it is folded into the query initialization.
        let scores = q.matmul(&k.t()?.contiguous()?)?.broadcast_add(bias)?;
        let weights = softmax(&scores, D::Minus1)?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, q_len, self.num_heads * self.d_kv))?;
        Ok(self.o.forward(&out)?)
    }
}

pub(crate) fn relative_position_bucket(
    relative_position: i64,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> u32 {
    let mut num_buckets = num_buckets as i64;
    let mut bucket = 0i64;
    let mut rel = relative_position;
    if bidirectional {
        num_buckets /= 2;
        if rel > 0 {
            bucket += num_buckets;
        }
        rel = rel.abs();
    } else {
        rel = -rel.min(0);
    }
    let max_exact = num_buckets / 2;
    if rel < max_exact {
        bucket += rel;
    } else {
        let scaled = (rel as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln()
            * (num_buckets - max_exact) as f64;
        bucket += (max_exact + scaled as i64).min(num_buckets - 1);
    }
    bucket as u32
}

#[derive(Debug, Clone)]
enum FeedForward {
    Relu { wi: Linear, wo: Linear },
    GatedGelu { wi_0: Linear, wi_1: Linear, wo: Linear },
}

impl FeedForward {
    fn load(store: &ParamStore, prefix: &str, cfg: &T5Config) -> Result<Self> {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        Ok(if cfg.gated() {
            FeedForward::GatedGelu {
                wi_0: Linear::load(store, &format!("{prefix}.wi_0"), f, d)?,
                wi_1: Linear::load(store, &format!("{prefix}.wi_1"), f, d)?,
                wo: Linear::load(store, &format!("{prefix}.wo"), d, f)?,
            }
        } else {
            FeedForward::Relu {
                wi: Linear::load(store, &format!("{prefix}.wi"), f, d)?,
                wo: Linear::load(store, &format!("{prefix}.wo"), d, f)?,
            }
        })
    }
}

impl Module for FeedForward {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            FeedForward::Relu { wi, wo } => wo.forward(&wi.forward(xs)?.relu()?),
            FeedForward::GatedGelu { wi_0, wi_1, wo } => {
                let gate = wi_0.forward(xs)?.gelu()?;
                wo.forward(&(gate * wi_1.forward(xs)?)?)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    self_attn: Attention,
    self_norm: RmsNorm,
    cross: Option<(Attention, RmsNorm)>,
    ff: FeedForward,
    ff_norm: RmsNorm,
}

impl Block {
    fn load(store: &ParamStore, stack: &str, i: usize, cfg: &T5Config) -> Result<Self> {
        let p = format!("{stack}.block.{i}.layer");
        let d = cfg.d_model;
        let eps = cfg.layer_norm_epsilon;
        let self_attn = Attention::load(store, &format!("{p}.0.SelfAttention"), cfg, i == 0)?;
        let self_norm = RmsNorm::load(store, &format!("{p}.0.layer_norm"), d, eps)?;
        let (cross, ff_index) = if stack == "decoder" {
            let attn = Attention::load(store, &format!("{p}.1.EncDecAttention"), cfg, false)?;
            let norm = RmsNorm::load(store, &format!("{p}.1.layer_norm"), d, eps)?;
            (Some((attn, norm)), 2)
        } else {
            (None, 1)
        };
        Ok(Block {
            self_attn,
            self_norm,
            cross,
            ff: FeedForward::load(store, &format!("{p}.{ff_index}.DenseReluDense"), cfg)?,
            ff_norm: RmsNorm::load(store, &format!("{p}.{ff_index}.layer_norm"), d, eps)?,
        })
    }

    fn forward(&self, xs: &Tensor, self_bias: &Tensor, memory: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
        let h = self.self_norm.forward(xs)?;
        let mut xs = (xs + self.self_attn.forward(&h, None, self_bias)?)?;
        if let (Some((attn, norm)), Some((mem, mem_bias))) = (&self.cross, memory) {
            let h = norm.forward(&xs)?;
            xs = (&xs + attn.forward(&h, Some(mem), mem_bias)?)?;
        }
        let h = self.ff_norm.forward(&xs)?;
        Ok((&xs + self.ff.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct T5Model {
    cfg: T5Config,
    shared: Tensor,
    encoder: Vec<Block>,
    encoder_norm: RmsNorm,
    decoder: Vec<Block>,
    decoder_norm: RmsNorm,
    lm_head: Option<Linear>,
}

/// Additive attention bias `[B, 1, 1, T]`: 0 where attended, large negative on padding.
fn padding_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, t) = mask.dims2()?;
    Ok(((mask.to_dtype(DType::F32)?.ones_like()? - mask.to_dtype(DType::F32)?)? * MASK_NEG)?.reshape((b, 1, 1, t))?)
}

fn causal_bias(len: usize, device: &Device) -> Result<Tensor> {
    let values: Vec<f32> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j > i { MASK_NEG as f32 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(values, (1, 1, len, len), device)?)
}

impl T5Model {
    pub fn from_params(cfg: &T5Config, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let eps = cfg.layer_norm_epsilon;
        let encoder = (0..cfg.num_layers)
            .map(|i| Block::load(store, "encoder", i, cfg))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.decoder_layers())
            .map(|i| Block::load(store, "decoder", i, cfg))
            .collect::<Result<Vec<_>>>()?;
        let lm_head = if cfg.tie_word_embeddings {
            None
        } else {
            Some(Linear::load(store, "lm_head", cfg.vocab_size, d)?)
        };
        Ok(T5Model {
            cfg: cfg.clone(),
            shared: store.tensor("shared.weight", &[cfg.vocab_size, d])?,
            encoder,
            encoder_norm: RmsNorm::load(store, "encoder.final_layer_norm", d, eps)?,
            decoder,
            decoder_norm: RmsNorm::load(store, "decoder.final_layer_norm", d, eps)?,
            lm_head,
        })
    }

    pub fn config(&self) -> &T5Config {
        &self.cfg
    }

    fn embed(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        Ok(self
            .shared
            .embedding(&ids.flatten_all()?)?
            .reshape((b, t, self.cfg.d_model))?)
    }

    /// Final-layer encoder states `[B, T, d_model]`.
    pub fn encode(&self, ids: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let t = ids.dim(1)?;
        let mut xs = self.embed(ids)?;
        let bias = self.encoder[0]
            .self_attn
            .position_bias(t, t, true, ids.device())?
            .broadcast_add(&padding_bias(mask)?)?;
        for block in &self.encoder {
            xs = block.forward(&xs, &bias, None)?;
        }
        Ok(self.encoder_norm.forward(&xs)?)
    }

    /// Final-layer decoder states `[B, L, d_model]` for the given decoder inputs.
    pub fn decode(&self, decoder_input: &Tensor, memory: &Tensor, memory_mask: &Tensor) -> Result<Tensor> {
        let l = decoder_input.dim(1)?;
        let device = decoder_input.device();
        let mut xs = self.embed(decoder_input)?;
        let self_bias = self.decoder[0]
            .self_attn
            .position_bias(l, l, false, device)?
            .broadcast_add(&causal_bias(l, device)?)?;
        let mem_bias = padding_bias(memory_mask)?;
        for block in &self.decoder {
            xs = block.forward(&xs, &self_bias, Some((memory, &mem_bias)))?;
        }
        Ok(self.decoder_norm.forward(&xs)?)
    }

    /// Vocabulary logits `[B, L, V]` from decoder states.
    pub fn lm_logits(&self, decoder_states: &Tensor) -> Result<Tensor> {
        Ok(match &self.lm_head {
            Some(head) => head.forward(decoder_states)?,
            None => {
                let scaled = (decoder_states * (self.cfg.d_model as f64).powf(-0.5))?;
                scaled.broadcast_matmul(&self.shared.t()?)?
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_values_match_reference_layout() {
        // Values from the reference bucketing with 32 buckets, distance 128.
        assert_eq!(relative_position_bucket(0, true, 32, 128), 0);
        assert_eq!(relative_position_bucket(3, true, 32, 128), 19);
        assert_eq!(relative_position_bucket(-3, true, 32, 128), 3);
        assert_eq!(relative_position_bucket(-8, true, 32, 128), 8);
        assert_eq!(relative_position_bucket(-1000, true, 32, 128), 15);
        assert_eq!(relative_position_bucket(1000, true, 32, 128), 31);
        assert_eq!(relative_position_bucket(5, false, 32, 128), 0);
        assert_eq!(relative_position_bucket(-5, false, 32, 128), 5);
        assert_eq!(relative_position_bucket(-20, false, 32, 128), 17);
        assert_eq!(relative_position_bucket(-1000, false, 32, 128), 31);
    }
}
