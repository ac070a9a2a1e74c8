//! Encoder-decoder backbone with the attached two-layer sentiment head.
//!
//! The bundle exposes the pieces the objectives need: encoder states for the
//! dialogue context, teacher-forced decoder states and logits for the gold
//! reply, masked-mean pooling, and the shared head that turns either pooled
//! vector into 300-d sentiment features (`c` for context, `r` for response).

pub mod head;
pub mod params;
pub mod t5;

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use head::{HeadActivation, SentimentHead, FEATURE_DIM, NUM_CLASSES};
pub use params::ParamStore;
pub use t5::{T5Config, T5Model};

use crate::corpus::{Polarity, TrainingExample};
use crate::error::{Error, IoContext, Result};
use crate::objectives::LossWeights;
use crate::tokenizer::{Tokenizer, WordTokenizer};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const METADATA_FILE: &str = "metadata.json";

fn default_source_len() -> usize {
    512
}
fn default_target_len() -> usize {
    64
}
fn default_classes() -> Vec<Polarity> {
    vec![Polarity::Positive, Polarity::Negative]
}
fn default_pooling() -> String {
    "masked-mean".into()
}
fn default_feature_dim() -> usize {
    FEATURE_DIM
}

/// Everything about a bundle that is not a tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    /// Identity of the pretrained checkpoint the bundle started from.
    pub checkpoint: String,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_classes")]
    pub class_order: Vec<Polarity>,
    #[serde(default)]
    pub head_activation: HeadActivation,
    #[serde(default = "default_pooling")]
    pub pooling: String,
    #[serde(default = "default_source_len")]
    pub max_source_len: usize,
    #[serde(default = "default_target_len")]
    pub max_target_len: usize,
    #[serde(default)]
    pub loss_weights: Option<LossWeights>,
    #[serde(default)]
    pub init_seed: u64,
}

impl BundleMetadata {
    pub fn new(checkpoint: impl Into<String>) -> Self {
        BundleMetadata {
            checkpoint: checkpoint.into(),
            feature_dim: FEATURE_DIM,
            class_order: default_classes(),
            head_activation: HeadActivation::default(),
            pooling: default_pooling(),
            max_source_len: default_source_len(),
            max_target_len: default_target_len(),
            loss_weights: None,
            init_seed: 0,
        }
    }
}

/// Token ids for one example: context ends with EOS, target ends with EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    pub context: Vec<u32>,
    pub target: Vec<u32>,
    pub label: Polarity,
}

/// Padded tensors for a mini-batch.
#[derive(Debug, Clone)]
pub struct ExampleBatch {
    pub context_ids: Tensor,
    pub context_mask: Tensor,
    pub target_ids: Tensor,
    pub target_mask: Tensor,
    pub labels: Tensor,
}

/// Everything one training or scoring pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub token_logits: Tensor,
    pub context_features: Tensor,
    pub response_features: Tensor,
    pub sentiment_logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct BackboneBundle {
    params: ParamStore,
    model: T5Model,
    head: SentimentHead,
    tokenizer: Tokenizer,
    meta: BundleMetadata,
    device: Device,
}

/// Masked mean over the time axis: `[B, T, d]` with mask `[B, T]` -> `[B, d]`.
pub fn pool(states: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mask = mask.to_dtype(states.dtype())?;
    let counts = mask.sum_keepdim(D::Minus1)?;
    let min_count = counts.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if min_count <= 0.0 {
        return Err(Error::InvalidInput("pooling over a fully masked sequence".into()));
    }
    let summed = states.broadcast_mul(&mask.unsqueeze(D::Minus1)?)?.sum(1)?;
    Ok(summed.broadcast_div(&counts)?)
}

/// Right-pads sequences with `pad_id`; returns ids `[B, T]` and a 0/1 mask.
pub fn pad_batch(seqs: &[&[u32]], pad_id: u32, device: &Device) -> Result<(Tensor, Tensor)> {
    if seqs.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
    let mut ids = Vec::with_capacity(seqs.len() * width);
    let mut mask = Vec::with_capacity(seqs.len() * width);
    for s in seqs {
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat_n(pad_id, width - s.len()));
        mask.extend(std::iter::repeat_n(1f32, s.len()));
        mask.extend(std::iter::repeat_n(0f32, width - s.len()));
    }
    Ok((
        Tensor::from_vec(ids, (seqs.len(), width), device)?,
        Tensor::from_vec(mask, (seqs.len(), width), device)?,
    ))
}

impl BackboneBundle {
    fn assemble(params: ParamStore, cfg: &T5Config, tokenizer: Tokenizer, meta: BundleMetadata) -> Result<Self> {
        if meta.feature_dim != FEATURE_DIM {
            return Err(Error::InvalidInput(format!("feature_dim must be {FEATURE_DIM}")));
        }
        let model = T5Model::from_params(cfg, &params)?;
        let head = SentimentHead::from_params(cfg.d_model, &params, meta.head_activation)?;
        if head.input_dim() != cfg.d_model {
            return Err(Error::InvalidInput("sentiment head width differs from hidden size".into()));
        }
        let vocab = tokenizer.vocab_size();
        let fits = match tokenizer {
            Tokenizer::Word(_) => vocab == cfg.vocab_size,
            // Subword checkpoints pad the embedding table past the tokenizer size.
            Tokenizer::Pretrained(_) => vocab <= cfg.vocab_size,
        };
        if !fits {
            return Err(Error::InvalidInput(format!(
                "tokenizer vocabulary {vocab} does not match embedding table {}",
                cfg.vocab_size
            )));
        }
        Ok(BackboneBundle {
            params,
            model,
            head,
            tokenizer,
            meta,
            device: Device::Cpu,
        })
    }

    /// Fresh, seeded random initialization of backbone and head.
    pub fn random(cfg: T5Config, tokenizer: Tokenizer, mut meta: BundleMetadata, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        {
            let mut init = params::Init {
                store: &mut params,
                rng: &mut rng,
                dtype: DType::F32,
                device: Device::Cpu,
            };
            t5::init_params(&cfg, &mut init)?;
            head::init_params(cfg.d_model, &mut init)?;
        }
        meta.init_seed = seed;
        Self::assemble(params, &cfg, tokenizer, meta)
    }

    /// Small model with a word vocabulary fitted on the examples' text.
    pub fn tiny(examples: &[TrainingExample], layers: usize, width: usize, seed: u64) -> Result<Self> {
        let texts = examples
            .iter()
            .flat_map(|e| [e.context_text.as_str(), e.target_text.as_str()]);
        let vocab = WordTokenizer::fit(texts, 1);
        let cfg = T5Config::tiny(vocab.len(), layers, width);
        let meta = BundleMetadata::new(format!("tiny-random-{layers}x{width}"));
        Self::random(cfg, Tokenizer::Word(vocab), meta, seed)
    }

    /// Loads a checkpoint directory: `config.json`, `model.safetensors`, a
    /// tokenizer file and optionally `metadata.json`. A missing sentiment head
    /// (plain pretrained checkpoint) is freshly initialized.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg_path = dir.join(CONFIG_FILE);
        let cfg: T5Config = serde_json::from_slice(&fs::read(&cfg_path).with_path(&cfg_path)?)?;
        let meta_path = dir.join(METADATA_FILE);
        let meta = if meta_path.exists() {
            serde_json::from_slice(&fs::read(&meta_path).with_path(&meta_path)?)?
        } else {
            BundleMetadata::new(dir.display().to_string())
        };
        let mut params = ParamStore::load(&dir.join(WEIGHTS_FILE), DType::F32, &Device::Cpu)?;
        if cfg.tie_word_embeddings {
            params.remove("lm_head.weight");
        }
        for name in ["encoder.embed_tokens.weight", "decoder.embed_tokens.weight"] {
            params.remove(name);
        }
        if !head::has_params(&params) {
            let mut rng = ChaCha8Rng::seed_from_u64(meta.init_seed);
            let mut init = params::Init {
                store: &mut params,
                rng: &mut rng,
                dtype: DType::F32,
                device: Device::Cpu,
            };
            head::init_params(cfg.d_model, &mut init)?;
        }
        let tokenizer = Tokenizer::load(dir)?;
        Self::assemble(params, &cfg, tokenizer, meta)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).with_path(dir)?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, serde_json::to_vec_pretty(self.model.config())?).with_path(&cfg_path)?;
        let meta_path = dir.join(METADATA_FILE);
        fs::write(&meta_path, serde_json::to_vec_pretty(&self.meta)?).with_path(&meta_path)?;
        self.params.save(&dir.join(WEIGHTS_FILE))?;
        self.tokenizer.save(dir)
    }

    /// Independent copy with its own parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        Self::assemble(
            self.params.deep_clone()?,
            self.model.config(),
            self.tokenizer.clone(),
            self.meta.clone(),
        )
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn config(&self) -> &T5Config {
        self.model.config()
    }

    pub fn metadata(&self) -> &BundleMetadata {
        &self.meta
    }

    pub fn metadata_mut(&mut self) -> &mut BundleMetadata {
        &mut self.meta
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn head(&self) -> &SentimentHead {
        &self.head
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn hidden_size(&self) -> usize {
        self.model.config().d_model
    }

    pub fn eos_id(&self) -> u32 {
        self.model.config().eos_token_id
    }

    pub fn pad_id(&self) -> u32 {
        self.model.config().pad_token_id
    }

    /// Context ids, left-truncated to `max_source_len` (EOS included) so the
    /// most recent turns survive.
    pub fn context_ids(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = self.tokenizer.encode(text)?;
        if ids.is_empty() {
            return Err(Error::InvalidInput("context tokenizes to nothing".into()));
        }
        let keep = self.meta.max_source_len.saturating_sub(1).max(1);
        if ids.len() > keep {
            ids.drain(..ids.len() - keep);
        }
        ids.push(self.eos_id());
        Ok(ids)
    }

    /// Target ids, right-truncated to `max_target_len` with EOS appended.
    pub fn target_ids(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = self.tokenizer.encode(text)?;
        ids.truncate(self.meta.max_target_len.saturating_sub(1));
        ids.push(self.eos_id());
        Ok(ids)
    }

    pub fn tokenize_example(&self, ex: &TrainingExample) -> Result<TokenizedExample> {
        Ok(TokenizedExample {
            context: self.context_ids(&ex.context_text)?,
            target: self.target_ids(&ex.target_text)?,
            label: ex.polarity,
        })
    }

    pub fn collate(&self, examples: &[&TokenizedExample]) -> Result<ExampleBatch> {
        let contexts: Vec<&[u32]> = examples.iter().map(|e| e.context.as_slice()).collect();
        let targets: Vec<&[u32]> = examples.iter().map(|e| e.target.as_slice()).collect();
        let (context_ids, context_mask) = pad_batch(&contexts, self.pad_id(), &self.device)?;
        let (target_ids, target_mask) = pad_batch(&targets, self.pad_id(), &self.device)?;
        let labels: Vec<u32> = examples.iter().map(|e| e.label.index() as u32).collect();
        Ok(ExampleBatch {
            context_ids,
            context_mask,
            target_ids,
            target_mask,
            labels: Tensor::new(labels, &self.device)?,
        })
    }

    pub fn batch(&self, examples: &[TrainingExample]) -> Result<ExampleBatch> {
        let tokenized = examples
            .iter()
            .map(|e| self.tokenize_example(e))
            .collect::<Result<Vec<_>>>()?;
        self.collate(&tokenized.iter().collect::<Vec<_>>())
    }

    /// Final-layer encoder states `[B, T, d]` for padded context ids.
    pub fn encode_context(&self, ids: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (_, t) = ids.dims2()?;
        if t > self.meta.max_source_len {
            return Err(Error::InvalidInput(format!(
                "context of {t} tokens exceeds max_source_len {}",
                self.meta.max_source_len
            )));
        }
        let min_row = mask.to_dtype(DType::F32)?.sum(1)?.min_all()?.to_scalar::<f32>()?;
        if min_row <= 0.0 {
            return Err(Error::InvalidInput("context mask is all padding".into()));
        }
        self.model.encode(ids, mask)
    }

    /// Teacher-forced pass over gold targets `[B, L]`. Returns logits
    /// `[B, L, V]` (position i predicts target i from targets < i) and the
    /// final-layer decoder states `[B, L, d]`.
    pub fn decode_teacher_forced(
        &self,
        encoder_states: &Tensor,
        mask: &Tensor,
        target_ids: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (_, l) = target_ids.dims2()?;
        if l == 0 {
            return Err(Error::InvalidInput("empty target".into()));
        }
        if l > self.meta.max_target_len {
            return Err(Error::InvalidInput(format!(
                "target of {l} tokens exceeds max_target_len {}",
                self.meta.max_target_len
            )));
        }
        let decoder_input = self.shift_right(target_ids)?;
        let states = self.model.decode(&decoder_input, encoder_states, mask)?;
        let logits = self.model.lm_logits(&states)?;
        Ok((logits, states))
    }

    fn shift_right(&self, target_ids: &Tensor) -> Result<Tensor> {
        let (b, l) = target_ids.dims2()?;
        let start = Tensor::full(self.model.config().decoder_start_token_id, (b, 1), &self.device)?;
        Ok(Tensor::cat(&[&start, &target_ids.narrow(1, 0, l - 1)?], 1)?)
    }

    /// First head layer plus nonlinearity: the 300-d sentiment features.
    pub fn sentiment_features(&self, pooled: &Tensor) -> Result<Tensor> {
        self.head.features(pooled)
    }

    /// Second head layer: index 0 = positive, 1 = negative.
    pub fn sentiment_logits(&self, features: &Tensor) -> Result<Tensor> {
        self.head.logits(features)
    }

    /// Full training-time pass: token logits plus `c`, `r` and the context's
    /// sentiment logits. `r` comes from the gold reply's decoder states.
    pub fn forward(&self, batch: &ExampleBatch) -> Result<ForwardOutput> {
        let enc = self.encode_context(&batch.context_ids, &batch.context_mask)?;
        let (token_logits, dec) = self.decode_teacher_forced(&enc, &batch.context_mask, &batch.target_ids)?;
        let context_features = self.sentiment_features(&pool(&enc, &batch.context_mask)?)?;
        let response_features = self.sentiment_features(&pool(&dec, &batch.target_mask)?)?;
        let sentiment_logits = self.sentiment_logits(&context_features)?;
        Ok(ForwardOutput {
            token_logits,
            context_features,
            response_features,
            sentiment_logits,
        })
    }

    /// Encoder states and mask for a single raw context.
    pub fn encode_text(&self, context: &str) -> Result<(Tensor, Tensor)> {
        let ids = self.context_ids(context)?;
        let (ids, mask) = pad_batch(&[&ids], self.pad_id(), &self.device)?;
        let states = self.encode_context(&ids, &mask)?;
        Ok((states, mask))
    }

    /// Polarity logits `[2]` for a raw context.
    pub fn polarity_logits(&self, context: &str) -> Result<Vec<f32>> {
        let (states, mask) = self.encode_text(context)?;
        let features = self.sentiment_features(&pool(&states, &mask)?)?;
        Ok(self.sentiment_logits(&features)?.i(0)?.to_vec1()?)
    }

    /// Next-token logits after `prefix` (generated ids so far, no start token).
    pub fn next_token_logits(&self, memory: &Tensor, memory_mask: &Tensor, prefix: &[u32]) -> Result<Vec<f32>> {
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(self.model.config().decoder_start_token_id);
        input.extend_from_slice(prefix);
        let len = input.len();
        let input = Tensor::from_vec(input, (1, len), &self.device)?;
        let states = self.model.decode(&input, memory, memory_mask)?;
        let last = states.narrow(1, len - 1, 1)?;
        Ok(self.model.lm_logits(&last)?.flatten_all()?.to_vec1()?)
    }

    /// Sentiment features of an arbitrary response text (e.g. a sampled one)
    /// given its context, computed by teacher forcing that text.
    pub fn response_features(&self, context: &str, response: &str) -> Result<(Tensor, Tensor)> {
        let (enc, mask) = self.encode_text(context)?;
        let target = self.target_ids(response)?;
        let (target, target_mask) = pad_batch(&[&target], self.pad_id(), &self.device)?;
        let (_, dec) = self.decode_teacher_forced(&enc, &mask, &target)?;
        let c = self.sentiment_features(&pool(&enc, &mask)?)?;
        let r = self.sentiment_features(&pool(&dec, &target_mask)?)?;
        Ok((c, r))
    }

    /// Replaces the loss weights recorded in the metadata.
    pub fn record_loss_weights(&mut self, weights: LossWeights) {
        self.meta.loss_weights = Some(weights);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Polarity;

    fn toy_examples() -> Vec<TrainingExample> {
        ["I won the lottery", "my dog died yesterday"]
            .iter()
            .zip(["that is great !", "I am so sorry ."])
            .enumerate()
            .map(|(i, (c, t))| TrainingExample {
                context_text: format!("Speaker: {c}"),
                target_text: t.to_string(),
                polarity: if i == 0 { Polarity::Positive } else { Polarity::Negative },
                conversation_id: format!("c{i}"),
                turn_index: 1,
            })
            .collect()
    }

    fn t(data: &[f32], shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn m(data: &[f32], shape: (usize, usize)) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn pool_examples() {
        let out = pool(&t(&[1., 3., 3., 5.], (1, 2, 2)), &m(&[1., 1.], (1, 2))).unwrap();
        assert_eq!(out.to_vec2::<f32>().unwrap(), vec![vec![2., 4.]]);
        let out = pool(&t(&[7., 8.], (1, 1, 2)), &m(&[1.], (1, 1))).unwrap();
        assert_eq!(out.to_vec2::<f32>().unwrap(), vec![vec![7., 8.]]);
        let out = pool(&t(&[2., 2., 9., 9.], (1, 2, 2)), &m(&[1., 0.], (1, 2))).unwrap();
        assert_eq!(out.to_vec2::<f32>().unwrap(), vec![vec![2., 2.]]);
        assert!(pool(&t(&[2., 2., 9., 9.], (1, 2, 2)), &m(&[0., 0.], (1, 2))).is_err());
    }

    #[test]
    fn pool_is_permutation_equivariant() {
        let a = pool(&t(&[1., 2., 3., 4., 5., 6.], (1, 3, 2)), &m(&[1., 0., 1.], (1, 3))).unwrap();
        let b = pool(&t(&[5., 6., 1., 2., 3., 4.], (1, 3, 2)), &m(&[1., 1., 0.], (1, 3))).unwrap();
        assert_eq!(a.to_vec2::<f32>().unwrap(), b.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn shapes_and_determinism() {
        let bundle = BackboneBundle::tiny(&toy_examples(), 2, 32, 7).unwrap();
        let batch = bundle.batch(&toy_examples()).unwrap();
        let (b, t) = batch.context_ids.dims2().unwrap();
        let enc = bundle.encode_context(&batch.context_ids, &batch.context_mask).unwrap();
        assert_eq!(enc.dims(), &[b, t, 32]);
        let enc2 = bundle.encode_context(&batch.context_ids, &batch.context_mask).unwrap();
        let flat = |x: &Tensor| x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(flat(&enc), flat(&enc2));

        let (logits, states) = bundle
            .decode_teacher_forced(&enc, &batch.context_mask, &batch.target_ids)
            .unwrap();
        let l = batch.target_ids.dim(1).unwrap();
        assert_eq!(logits.dims(), &[b, l, bundle.config().vocab_size]);
        assert_eq!(states.dims(), &[b, l, 32]);

        let out = bundle.forward(&batch).unwrap();
        assert_eq!(out.context_features.dims(), &[b, FEATURE_DIM]);
        assert_eq!(out.response_features.dims(), &[b, FEATURE_DIM]);
        assert_eq!(out.sentiment_logits.dims(), &[b, NUM_CLASSES]);
    }

    #[test]
    fn decoder_is_causal() {
        let bundle = BackboneBundle::tiny(&toy_examples(), 2, 32, 3).unwrap();
        let (enc, mask) = bundle.encode_text("Speaker: I won the lottery").unwrap();
        let a = Tensor::new(&[[5u32, 6, 7, 8]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[[5u32, 6, 9, 3]], &Device::Cpu).unwrap();
        let (la, _) = bundle.decode_teacher_forced(&enc, &mask, &a).unwrap();
        let (lb, _) = bundle.decode_teacher_forced(&enc, &mask, &b).unwrap();
        // Positions 0..=2 only see targets < i, identical across a and b.
        let prefix = |x: &Tensor| x.narrow(1, 0, 3).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(prefix(&la), prefix(&lb));
        let last = |x: &Tensor| x.narrow(1, 3, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(last(&la), last(&lb));
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let bundle = BackboneBundle::tiny(&toy_examples(), 1, 16, 1).unwrap();
        let ids = Tensor::new(&[[0u32, 0]], &Device::Cpu).unwrap();
        let mask = m(&[0., 0.], (1, 2));
        assert!(bundle.encode_context(&ids, &mask).is_err());

        let (enc, mask) = bundle.encode_text("Speaker: I won").unwrap();
        let empty = Tensor::zeros((1, 0), DType::U32, &Device::Cpu).unwrap();
        assert!(bundle.decode_teacher_forced(&enc, &mask, &empty).is_err());
        let long = Tensor::zeros((1, 65), DType::U32, &Device::Cpu).unwrap();
        assert!(bundle.decode_teacher_forced(&enc, &mask, &long).is_err());
        let over = Tensor::ones((1, 513), DType::U32, &Device::Cpu).unwrap();
        let over_mask = Tensor::ones((1, 513), DType::F32, &Device::Cpu).unwrap();
        assert!(bundle.encode_context(&over, &over_mask).is_err());
    }

    #[test]
    fn zero_head_gives_zero_features_and_logits() {
        let z = |shape: &[usize]| Tensor::zeros(shape, DType::F32, &Device::Cpu).unwrap();
        let head = SentimentHead::from_tensors(
            z(&[FEATURE_DIM, 8]),
            z(&[FEATURE_DIM]),
            z(&[2, FEATURE_DIM]),
            z(&[2]),
            HeadActivation::Tanh,
        )
        .unwrap();
        let pooled = Tensor::ones((1, 8), DType::F32, &Device::Cpu).unwrap();
        let f = head.features(&pooled).unwrap();
        assert_eq!(f.dims(), &[1, FEATURE_DIM]);
        assert!(f.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&x| x == 0.0));
        assert_eq!(head.logits(&f).unwrap().to_vec2::<f32>().unwrap(), vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn features_stay_finite_for_large_inputs() {
        use rand::{Rng, SeedableRng};
        let bundle = BackboneBundle::tiny(&toy_examples(), 1, 16, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let v: Vec<f32> = (0..16).map(|_| rng.random_range(-1e3f32..1e3)).collect();
            let pooled = Tensor::from_vec(v, (1, 16), &Device::Cpu).unwrap();
            let f = bundle.sentiment_features(&pooled).unwrap();
            assert_eq!(f.dims(), &[1, FEATURE_DIM]);
            assert!(f.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = BackboneBundle::tiny(&toy_examples(), 1, 16, 5).unwrap();
        bundle.save(dir.path()).unwrap();
        let back = BackboneBundle::load(dir.path()).unwrap();
        assert!(back.params().identical(bundle.params()).unwrap());
        assert_eq!(back.metadata(), bundle.metadata());
        assert_eq!(
            back.polarity_logits("Speaker: I won").unwrap(),
            bundle.polarity_logits("Speaker: I won").unwrap()
        );
    }

    #[test]
    fn left_truncation_keeps_recent_tokens() {
        let mut bundle = BackboneBundle::tiny(&toy_examples(), 1, 16, 5).unwrap();
        bundle.metadata_mut().max_source_len = 3;
        let full = bundle.tokenizer().encode("Speaker: my dog died yesterday").unwrap();
        let ids = bundle.context_ids("Speaker: my dog died yesterday").unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(&ids[..2], &full[full.len() - 2..]);
        assert_eq!(ids[2], bundle.eos_id());
    }
}
