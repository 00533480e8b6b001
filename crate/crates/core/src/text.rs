//! Caption vocabulary, token batching and the transformer text encoder shared
//! by the contrastive model and the diffusion model's conditioning network.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::{dialect_a_words, dialect_b_words, CaptionRecord, PUNCTUATION};
use crate::nn::{attention, LayerNorm, Linear, ParamBuilder};
use crate::{Error, Result};

pub const PAD: &str = "<pad>";
pub const NULL: &str = "<null>";
pub const PAD_ID: u32 = 0;
pub const NULL_ID: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Specials, punctuation, and both template dialects.
    pub fn standard() -> Self {
        let mut tokens = vec![PAD.to_string(), NULL.to_string()];
        tokens.extend(PUNCTUATION.iter().map(|p| p.to_string()));
        tokens.extend(dialect_a_words().iter().cloned());
        tokens.extend(dialect_b_words());
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    /// Add any caption tokens not yet known (e.g. from externally written captions).
    pub fn extend_with<'a>(&mut self, captions: impl IntoIterator<Item = &'a CaptionRecord>) {
        for rec in captions {
            for tok in &rec.caption {
                if !self.index.contains_key(tok) {
                    self.index.insert(tok.clone(), self.tokens.len() as u32);
                    self.tokens.push(tok.clone());
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<u32>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_record(&self, rec: &CaptionRecord) -> Result<Vec<u32>> {
        self.encode(&rec.caption)
    }
}

/// Padded id matrix plus a {0,1} mask over real tokens.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub ids: Tensor,
    pub mask: Tensor,
}

impl TokenBatch {
    /// Sequences longer than `max_len` are truncated; empty sequences become
    /// a single null token.
    pub fn new(seqs: &[Vec<u32>], max_len: usize, dtype: DType) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let len = seqs.iter().map(|s| s.len().clamp(1, max_len)).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            let s: &[u32] = if s.is_empty() { &[NULL_ID] } else { &s[..s.len().min(max_len)] };
            for i in 0..len {
                ids.push(s.get(i).copied().unwrap_or(PAD_ID));
                mask.push(if i < s.len() { 1f32 } else { 0.0 });
            }
        }
        Ok(Self {
            ids: Tensor::from_vec(ids, (seqs.len(), len), &Device::Cpu)?,
            mask: Tensor::from_vec(mask, (seqs.len(), len), &Device::Cpu)?.to_dtype(dtype)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.ids.dims()[0]
    }

    /// Additive attention bias (B, 1, L): 0 on tokens, -1e9 on padding.
    pub fn attention_bias(&self) -> Result<Tensor> {
        let (b, l) = self.mask.dims2()?;
        Ok(((self.mask.ones_like()? - &self.mask)? * -1e9)?.reshape((b, 1, l))?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            max_len: 80,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(pb: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&mut pb.sub("ln1"), dim)?,
            q: Linear::new(&mut pb.sub("q"), dim, dim)?,
            k: Linear::new(&mut pb.sub("k"), dim, dim)?,
            v: Linear::new(&mut pb.sub("v"), dim, dim)?,
            out: Linear::new(&mut pb.sub("out"), dim, dim)?,
            ln2: LayerNorm::new(&mut pb.sub("ln2"), dim)?,
            fc1: Linear::new(&mut pb.sub("fc1"), dim, 2 * dim)?,
            fc2: Linear::new(&mut pb.sub("fc2"), 2 * dim, dim)?,
        })
    }

    fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let a = attention(&self.q.forward(&h)?, &self.k.forward(&h)?, &self.v.forward(&h)?, Some(bias))?;
        let x = (x + self.out.forward(&a)?)?;
        let h = self.ln2.forward(&x)?;
        let m = self.fc2.forward(&self.fc1.forward(&h)?.gelu()?)?;
        Ok((x + m)?)
    }
}

/// Token + learned position embeddings followed by pre-norm self-attention blocks.
#[derive(Clone, Debug)]
pub struct TextTransformer {
    config: TextEncoderConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl TextTransformer {
    pub fn new(pb: &mut ParamBuilder, vocab_size: usize, config: &TextEncoderConfig) -> Result<Self> {
        let tok_emb = pb.normal("tok_emb", &[vocab_size, config.dim], 0.5)?;
        let pos_emb = pb.normal("pos_emb", &[config.max_len, config.dim], 0.1)?;
        let blocks = (0..config.layers)
            .map(|i| Block::new(&mut pb.sub(&format!("block{i}")), config.dim))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut pb.sub("ln_f"), config.dim)?;
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    /// Per-token features (B, L, dim).
    pub fn forward(&self, batch: &TokenBatch) -> Result<Tensor> {
        let (b, l) = batch.ids.dims2()?;
        let tok = self.tok_emb.embedding(&batch.ids.flatten_all()?)?.reshape((b, l, self.config.dim))?;
        let pos = self.pos_emb.narrow(0, 0, l)?;
        let mut x = tok.broadcast_add(&pos)?;
        let bias = batch.attention_bias()?;
        for block in &self.blocks {
            x = block.forward(&x, &bias)?;
        }
        self.ln_f.forward(&x)
    }

    /// Mean of token features over non-padding positions, (B, dim).
    pub fn pooled(&self, batch: &TokenBatch) -> Result<Tensor> {
        let h = self.forward(batch)?;
        let mask = batch.mask.unsqueeze(2)?;
        let summed = h.broadcast_mul(&mask)?.sum(1)?;
        let counts = batch.mask.sum_keepdim(1)?;
        Ok(summed.broadcast_div(&counts)?)
    }
}
