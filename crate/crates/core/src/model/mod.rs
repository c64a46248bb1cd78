//! Image-to-token-sequence model.
//!
//! Data flow for a prefix `x[0..T]` and an image:
//!
//! ```text
//! image  -> extractor -> 1x512 -> Linear -> 1xd ----------------\
//! prefix -> embed + pos -> E causal blocks -> running mean Txd ---> concat Tx2d
//! prefix -> embed + pos + Linear(concat) -> D causal blocks -> Linear -> T x vocab
//! ```
//!
//! Row `t` of the encoder context averages the non-PAD encoder states at
//! positions `<= t`, so teacher-forced logits at `t` use exactly the inputs a
//! generator holding the prefix `x[0..=t]` would see. The last row is the
//! global average over the whole sequence, which is what [`EmoModel::encode_midi`]
//! returns.

mod image;
mod va;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use image::{load_image_input, load_pixels, pixels_from_image, ImageFeature, ImageInput, TinyCnn, FEATURE_DIM, FEATURE_MAGIC};
pub use va::{histogram_mask, token_histogram, VaPredictor, VaPredictorConfig};

use crate::nn::{
    attention_mask, sinusoidal_positions, AttentionConfig, Checkpoint, Embedding, Graph, Linear, NnError, ParamStore,
    Tensor, TransformerBlock, Var,
};
use crate::tokenizer::{TokenId, TokenSequence, TokenizerError, VocabConfig, Vocabulary, BOS, EOS, PAD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("prefix of {len} tokens exceeds max_len {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("bad feature file: {0}")]
    BadFeatureFile(String),
    #[error("bad image: {0}")]
    BadImage(String),
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("VA predictor weights missing: {0}")]
    WeightsMissing(String),
    #[error("model I/O: {0}")]
    Io(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Nn(NnError),
}

impl From<NnError> for ModelError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::CheckpointCorrupt(m) => ModelError::CheckpointCorrupt(m),
            NnError::UnknownBlock(b) => ModelError::CheckpointCorrupt(format!("missing block `{b}`")),
            NnError::Io(m) => ModelError::Io(m),
            other => ModelError::Nn(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageExtractor {
    TinyCnn,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub model_dim: usize,
    pub head_count: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub vocab: VocabConfig,
    pub image_extractor: ImageExtractor,
    /// Side length the tiny CNN resizes images to; a multiple of 4.
    pub image_size: usize,
    /// Lifts the encoder {2,3,4} / decoder {0,2,3} restriction, for reduced
    /// diagnostic configurations.
    pub allow_reduced: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_blocks: 3,
            decoder_blocks: 3,
            model_dim: 128,
            head_count: 4,
            ff_dim: 256,
            max_len: 256,
            vocab: VocabConfig::default(),
            image_extractor: ImageExtractor::TinyCnn,
            image_size: 32,
            allow_reduced: false,
        }
    }
}

pub const ENCODER_BLOCK_CHOICES: [usize; 3] = [2, 3, 4];
pub const DECODER_BLOCK_CHOICES: [usize; 3] = [0, 2, 3];

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if !self.allow_reduced {
            if !ENCODER_BLOCK_CHOICES.contains(&self.encoder_blocks) {
                return bad(format!("encoder_blocks must be one of {ENCODER_BLOCK_CHOICES:?}, got {}", self.encoder_blocks));
            }
            if !DECODER_BLOCK_CHOICES.contains(&self.decoder_blocks) {
                return bad(format!("decoder_blocks must be one of {DECODER_BLOCK_CHOICES:?}, got {}", self.decoder_blocks));
            }
        }
        AttentionConfig::new(self.model_dim, self.head_count).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        if self.ff_dim == 0 {
            return bad("ff_dim must be positive".into());
        }
        if self.max_len < 2 {
            return bad(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return bad(format!("image_size must be a positive multiple of 4, got {}", self.image_size));
        }
        Vocabulary::new(self.vocab)?;
        Ok(())
    }

    pub fn vocab_hash(&self) -> Result<String, ModelError> {
        Ok(Vocabulary::new(self.vocab)?.hash())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Greedy,
    /// Sample from `softmax(logits / tau)`.
    Temperature(f64),
}

#[derive(Debug, Clone)]
pub struct EmoModel {
    config: ModelConfig,
    seed: u64,
    vocab: Vocabulary,
    pub store: ParamStore,
    cnn: Option<TinyCnn>,
    img_proj: Linear,
    enc_embed: Embedding,
    enc_blocks: Vec<TransformerBlock>,
    dec_embed: Embedding,
    joint_proj: Linear,
    dec_blocks: Vec<TransformerBlock>,
    head: Linear,
    positions: Tensor,
}

const FORMAT: &str = "vamidi-model";

impl EmoModel {
    /// Builds the architecture with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let vocab = Vocabulary::new(config.vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let v = vocab.size();
        let attn = AttentionConfig::new(d, config.head_count)?;
        let cnn = match config.image_extractor {
            ImageExtractor::TinyCnn => Some(TinyCnn::new(&mut store, "cnn", &mut rng)?),
            ImageExtractor::Precomputed => None,
        };
        let img_proj = Linear::new(&mut store, "merge.image", FEATURE_DIM, d, &mut rng)?;
        let enc_embed = Embedding::new(&mut store, "enc.embed", v, d, &mut rng)?;
        let enc_blocks = (0..config.encoder_blocks)
            .map(|i| TransformerBlock::new(&mut store, &format!("enc.{i}"), attn, config.ff_dim, &mut rng))
            .collect::<Result<_, _>>()?;
        let dec_embed = Embedding::new(&mut store, "dec.embed", v, d, &mut rng)?;
        let joint_proj = Linear::new(&mut store, "dec.joint", 2 * d, d, &mut rng)?;
        let dec_blocks = (0..config.decoder_blocks)
            .map(|i| TransformerBlock::new(&mut store, &format!("dec.{i}"), attn, config.ff_dim, &mut rng))
            .collect::<Result<_, _>>()?;
        let head = Linear::new(&mut store, "dec.head", d, v, &mut rng)?;
        let positions = sinusoidal_positions(config.max_len, d);
        Ok(Self {
            config,
            seed,
            vocab,
            store,
            cnn,
            img_proj,
            enc_embed,
            enc_blocks,
            dec_embed,
            joint_proj,
            dec_blocks,
            head,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    /// The merge projection bias (zero at initialization).
    pub fn merge_bias(&self) -> &Tensor {
        self.store.value(self.img_proj.b)
    }

    pub fn check_ids(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab.size()) {
            return Err(ModelError::VocabMismatch(format!(
                "token id {bad} outside vocabulary {} of {} tokens",
                self.vocab.hash(),
                self.vocab.size()
            )));
        }
        if ids.len() > self.config.max_len {
            return Err(ModelError::PrefixTooLong { len: ids.len(), max: self.config.max_len });
        }
        Ok(())
    }

    /// Fails unless `hash` names this model's vocabulary.
    pub fn check_vocab_hash(&self, hash: &str) -> Result<(), ModelError> {
        if hash != self.vocab.hash() {
            return Err(ModelError::VocabMismatch(format!("expected {}, found {hash}", self.vocab.hash())));
        }
        Ok(())
    }

    /// `1 x 512` image feature.
    pub fn image_var(&self, g: &mut Graph, image: &ImageInput) -> Result<Var, ModelError> {
        self.image_var_in(&self.store, g, image)
    }

    /// Running-mean encoder context, `T x d`.
    pub fn encoder_var(&self, g: &mut Graph, ids: &[TokenId]) -> Result<Var, ModelError> {
        self.encoder_var_in(&self.store, g, ids)
    }

    /// Projects the image feature and concatenates it with each context row.
    pub fn merge_var(&self, g: &mut Graph, image_feature: Var, context: Var) -> Result<Var, ModelError> {
        self.merge_var_in(&self.store, g, image_feature, context)
    }

    /// Per-position logits `T x vocab` from per-position joint rows `T x 2d`.
    pub fn decoder_var(&self, g: &mut Graph, joint: Var, ids: &[TokenId]) -> Result<Var, ModelError> {
        self.decoder_var_in(&self.store, g, joint, ids)
    }

    /// Full forward pass: `T x vocab` logits for a prefix of length `T`.
    pub fn logits_var(&self, g: &mut Graph, image: &ImageInput, prefix: &[TokenId]) -> Result<Var, ModelError> {
        self.logits_var_in(&self.store, g, image, prefix)
    }

    // Variants reading weights from an explicit store.

    pub fn image_var_in(&self, s: &ParamStore, g: &mut Graph, image: &ImageInput) -> Result<Var, ModelError> {
        match image {
            ImageInput::Feature(f) => Ok(g.constant(f.to_tensor())),
            ImageInput::Pixels(px) => {
                let n = self.config.image_size;
                if px.shape() != [3, n, n] {
                    return Err(ModelError::BadImage(format!("pixel tensor {:?}, expected [3, {n}, {n}]", px.shape())));
                }
                let cnn = self.cnn.as_ref().ok_or_else(|| {
                    ModelError::InvalidConfig("raw pixels given to a model with a precomputed-feature extractor".into())
                })?;
                let x = g.constant(px.clone());
                Ok(cnn.forward(g, s, x)?)
            }
        }
    }

    pub fn encode_image(&self, image: &ImageInput) -> Result<ImageFeature, ModelError> {
        let mut g = Graph::new();
        let v = self.image_var(&mut g, image)?;
        ImageFeature::new(g.value(v).data().to_vec())
    }

    fn embed_in(&self, s: &ParamStore, g: &mut Graph, table: &Embedding, ids: &[TokenId]) -> Result<Var, ModelError> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let e = table.forward(g, s, &idx)?;
        let d = self.config.model_dim;
        let pos = Tensor::new(vec![ids.len(), d], self.positions.data()[..ids.len() * d].to_vec())?;
        let p = g.constant(pos);
        Ok(g.add(e, p)?)
    }

    pub fn encoder_var_in(&self, s: &ParamStore, g: &mut Graph, ids: &[TokenId]) -> Result<Var, ModelError> {
        self.check_ids(ids)?;
        let keep: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        let mask = attention_mask(ids.len(), ids.len(), true, Some(&keep));
        let mut h = self.embed_in(s, g, &self.enc_embed, ids)?;
        for blk in &self.enc_blocks {
            h = blk.forward(g, s, h, Some(&mask))?;
        }
        Ok(g.cum_masked_mean_rows(h, &keep)?)
    }

    /// Mean encoder state over non-PAD positions (`model_dim` values).
    pub fn encode_midi(&self, tokens: &TokenSequence) -> Result<Vec<f64>, ModelError> {
        let ids = tokens.ids();
        if ids.is_empty() {
            return Ok(vec![0.0; self.config.model_dim]);
        }
        let mut g = Graph::new();
        let ctx = self.encoder_var(&mut g, ids)?;
        Ok(g.value(ctx).row(ids.len() - 1).to_vec())
    }

    pub fn merge_var_in(&self, s: &ParamStore, g: &mut Graph, image_feature: Var, context: Var) -> Result<Var, ModelError> {
        let rows = g.value(context).rows();
        let p = self.img_proj.forward(g, s, image_feature)?;
        let p = g.broadcast_rows(p, rows)?;
        Ok(g.concat_cols(&[p, context])?)
    }

    /// Joint vector of length `2 * model_dim`.
    pub fn merge(&self, image: &ImageFeature, context: &[f64]) -> Result<Vec<f64>, ModelError> {
        let d = self.config.model_dim;
        if context.len() != d {
            return Err(ModelError::Nn(NnError::ShapeMismatch(format!("context of {} for model_dim {d}", context.len()))));
        }
        let mut g = Graph::new();
        let f = g.constant(image.to_tensor());
        let c = g.constant(Tensor::row_vector(context.to_vec()));
        let j = self.merge_var(&mut g, f, c)?;
        Ok(g.value(j).data().to_vec())
    }

    fn decoder_hidden_in(&self, s: &ParamStore, g: &mut Graph, joint: Var, ids: &[TokenId]) -> Result<Var, ModelError> {
        self.check_ids(ids)?;
        let keep: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        let mask = attention_mask(ids.len(), ids.len(), true, Some(&keep));
        let e = self.embed_in(s, g, &self.dec_embed, ids)?;
        let j = self.joint_proj.forward(g, s, joint)?;
        let mut h = g.add(e, j)?;
        for blk in &self.dec_blocks {
            h = blk.forward(g, s, h, Some(&mask))?;
        }
        Ok(h)
    }

    pub fn decoder_var_in(&self, s: &ParamStore, g: &mut Graph, joint: Var, ids: &[TokenId]) -> Result<Var, ModelError> {
        let h = self.decoder_hidden_in(s, g, joint, ids)?;
        Ok(self.head.forward(g, s, h)?)
    }

    /// Logits for a prefix under one joint vector shared by every position.
    pub fn decode_logits(&self, joint: &[f64], prefix: &TokenSequence) -> Result<Tensor, ModelError> {
        let d2 = 2 * self.config.model_dim;
        if joint.len() != d2 {
            return Err(ModelError::Nn(NnError::ShapeMismatch(format!("joint of {} for width {d2}", joint.len()))));
        }
        let ids = prefix.ids();
        self.check_ids(ids)?;
        let mut g = Graph::new();
        let j = g.constant(Tensor::row_vector(joint.to_vec()));
        let j = g.broadcast_rows(j, ids.len())?;
        let l = self.decoder_var(&mut g, j, ids)?;
        Ok(g.value(l).clone())
    }

    pub fn logits_var_in(&self, s: &ParamStore, g: &mut Graph, image: &ImageInput, prefix: &[TokenId]) -> Result<Var, ModelError> {
        let f = self.image_var_in(s, g, image)?;
        let ctx = self.encoder_var_in(s, g, prefix)?;
        let joint = self.merge_var_in(s, g, f, ctx)?;
        self.decoder_var_in(s, g, joint, prefix)
    }

    pub fn logits(&self, image: &ImageInput, prefix: &[TokenId]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let l = self.logits_var(&mut g, image, prefix)?;
        Ok(g.value(l).clone())
    }

    fn next_token_logits(&self, image_feature: &Tensor, prefix: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let f = g.constant(image_feature.clone());
        let ctx = self.encoder_var(&mut g, prefix)?;
        let joint = self.merge_var(&mut g, f, ctx)?;
        let h = self.decoder_hidden_in(&self.store, &mut g, joint, prefix)?;
        let last = g.gather(h, &[prefix.len() - 1])?;
        let l = self.head.forward(&mut g, &self.store, last)?;
        Ok(g.value(l).data().to_vec())
    }

    /// Autoregressive decoding from BOS until EOS or `max_len` tokens. PAD
    /// and BOS are never emitted.
    pub fn generate(
        &self,
        image: &ImageInput,
        max_len: usize,
        strategy: Strategy,
        seed: u64,
    ) -> Result<TokenSequence, ModelError> {
        if max_len > self.config.max_len {
            return Err(ModelError::PrefixTooLong { len: max_len, max: self.config.max_len });
        }
        if let Strategy::Temperature(t) = strategy {
            if !(t > 0.0 && t.is_finite()) {
                return Err(ModelError::InvalidConfig(format!("temperature must be positive, got {t}")));
            }
        }
        let feature = self.encode_image(image)?.to_tensor();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = vec![BOS];
        while ids.len() < max_len.max(1) {
            let mut logits = self.next_token_logits(&feature, &ids)?;
            logits[PAD as usize] = f64::NEG_INFINITY;
            logits[BOS as usize] = f64::NEG_INFINITY;
            let next = match strategy {
                Strategy::Greedy => argmax(&logits),
                Strategy::Temperature(t) => sample(&logits, t, &mut rng),
            };
            ids.push(next as TokenId);
            if next as TokenId == EOS {
                break;
            }
        }
        Ok(TokenSequence::from_raw(ids, max_len.max(1)))
    }

    /// Checkpoint with the model config, seed and vocabulary hash plus any
    /// caller-supplied run metadata under `run`.
    pub fn to_checkpoint(&self, run: serde_json::Value) -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({
            "format": FORMAT,
            "model": self.config,
            "seed": self.seed,
            "vocab_hash": self.vocab.hash(),
            "run": run,
        }));
        c.push_store(&self.store);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, ModelError> {
        let corrupt = |m: String| ModelError::CheckpointCorrupt(m);
        if c.config.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
            return Err(corrupt("not a model checkpoint".into()));
        }
        let config: ModelConfig =
            serde_json::from_value(c.config["model"].clone()).map_err(|e| corrupt(format!("model config: {e}")))?;
        let seed = c.config["seed"].as_u64().ok_or_else(|| corrupt("missing seed".into()))?;
        let mut m = Self::new(config, seed).map_err(|e| corrupt(e.to_string()))?;
        let hash = c.config["vocab_hash"].as_str().unwrap_or_default();
        m.check_vocab_hash(hash)?;
        c.restore_store(&mut m.store).map_err(|e| corrupt(e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path, run: serde_json::Value) -> Result<(), ModelError> {
        Ok(self.to_checkpoint(run).save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) }).0
}

fn sample<R: Rng>(logits: &[f64], tau: f64, rng: &mut R) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &wi) in w.iter().enumerate() {
        if wi > 0.0 {
            if u < wi {
                return i;
            }
            u -= wi;
        }
    }
    argmax(logits)
}
