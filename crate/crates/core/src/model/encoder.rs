use serde::{Deserialize, Serialize};

use super::nn::{init_normal, Block, Dropout, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{AttentionMask, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{TokenSequence, VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f32,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            hidden_dim: 64,
            ffn_dim: 256,
            max_len: 128,
            vocab_size: VOCAB_SIZE,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.num_layers, self.num_heads, self.hidden_dim, self.ffn_dim];
        if dims.contains(&0) {
            return Err(Error::config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::config(format!("max_len must be at least 3, got {}", self.max_len)));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::config(format!("vocab_size must be {VOCAB_SIZE}")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count:
    /// `V*d + max_len*d + 2d + layers * (4(d^2 + d) + 2*d*f + f + d + 4d) + d*V + V`
    /// (token and position tables, embedding norm, blocks, MLM head).
    pub fn num_params(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.hidden_dim, self.ffn_dim);
        v * d + self.max_len * d + 2 * d + self.num_layers * Block::num_params(d, f) + d * v + v
    }
}

/// Token + position embeddings, a post-norm block stack and a linear MLM head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: ParamStore,
    token_embedding: ParamId,
    position_embedding: ParamId,
    embed_norm: LayerNorm,
    blocks: Vec<Block>,
    mlm_head: Linear,
}

pub const MLM_PREFIX: &str = "mlm.";

impl EncoderModel {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut params = ParamStore::new();
        let d = config.hidden_dim;
        let token_embedding = params.add("embed.token", init_normal(&mut rng, &[config.vocab_size, d]));
        let position_embedding = params.add("embed.position", init_normal(&mut rng, &[config.max_len, d]));
        let embed_norm = LayerNorm::new(&mut params, "embed.norm", d);
        let blocks = (0..config.num_layers)
            .map(|i| Block::new(&mut params, &format!("layer{i}"), d, config.ffn_dim, config.num_heads, &mut rng))
            .collect();
        let mlm_head = Linear::new(&mut params, "mlm.head", d, config.vocab_size, &mut rng);
        Ok(Self {
            config,
            params,
            token_embedding,
            position_embedding,
            embed_norm,
            blocks,
            mlm_head,
        })
    }

    /// Rebuild from a parameter store, checking names and shapes against `config`.
    pub fn from_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.params.copy_values_from(&params)?;
        Ok(model)
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Freeze or unfreeze everything except the MLM head.
    pub fn set_body_trainable(&mut self, on: bool) {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            if !self.params.name(id).starts_with(MLM_PREFIX) {
                self.params.get_mut(id).requires_grad = on;
            }
        }
    }

    pub fn set_mlm_trainable(&mut self, on: bool) {
        self.params.set_requires_grad_prefix(MLM_PREFIX, on);
    }

    /// Hidden states `[B, L, d]` for a batch padded to a common length.
    /// Padded keys get zero attention weight.
    pub fn encode_batch(&self, tape: &mut Tape, batch: &[TokenSequence], dropout: &mut Dropout<'_>) -> Result<Var> {
        let (ids, mask, l) = flatten(batch, self.config.max_len)?;
        let x = self.embed(tape, &ids, batch.len(), l, dropout)?;
        let mask = AttentionMask {
            heads: self.config.num_heads,
            key_valid: Some(mask),
            causal: false,
        };
        self.run_blocks(tape, x, &mask, dropout)
    }

    fn embed(&self, tape: &mut Tape, ids: &[usize], b: usize, l: usize, dropout: &mut Dropout<'_>) -> Result<Var> {
        let d = self.config.hidden_dim;
        let table = tape.param(&self.params, self.token_embedding);
        let tok = tape.embedding(table, ids)?;
        let tok = tape.reshape(tok, &[b, l, d])?;
        let pos_table = tape.param(&self.params, self.position_embedding);
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = tape.embedding(pos_table, &positions)?;
        let pos = tape.reshape(pos, &[b, l, d])?;
        let x = tape.add(tok, pos)?;
        let x = self.embed_norm.forward(tape, &self.params, x)?;
        dropout.apply(tape, x)
    }

    fn run_blocks(&self, tape: &mut Tape, mut x: Var, mask: &AttentionMask, dropout: &mut Dropout<'_>) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(tape, &self.params, x, mask, dropout)?;
        }
        Ok(x)
    }

    /// `[B, L, d]` hidden states to `[B, L, V]` logits.
    pub fn mlm_logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let s = tape.shape(hidden);
        if s.len() != 3 || s[2] != self.config.hidden_dim {
            return Err(Error::shape(format!("mlm_logits on hidden {s:?}")));
        }
        self.mlm_head.forward(tape, &self.params, hidden)
    }

    /// Evaluation-mode hidden states as a plain tensor.
    pub fn encode_eval(&self, batch: &[TokenSequence]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = self.encode_batch(&mut tape, batch, &mut Dropout::eval())?;
        Ok(tape.to_tensor(h))
    }

    /// Evaluation-mode pooled embeddings `[B, d]`.
    pub fn embed_pooled(&self, batch: &[TokenSequence]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = self.encode_batch(&mut tape, batch, &mut Dropout::eval())?;
        let p = pool(&mut tape, h, batch)?;
        Ok(tape.to_tensor(p))
    }
}

/// Mean over positions with `attention_mask == 1`, which includes the
/// `[CLS]` and `[SEP]` tokens. Output `[B, d]`.
pub fn pool(tape: &mut Tape, hidden: Var, batch: &[TokenSequence]) -> Result<Var> {
    let mask: Vec<bool> = batch
        .iter()
        .flat_map(|t| t.attention_mask.iter().map(|&m| m == 1))
        .collect();
    tape.masked_mean(hidden, &mask)
}

/// Row-major ids and key mask of a batch; all sequences must share a length
/// no longer than `max_len`.
pub(crate) fn flatten(batch: &[TokenSequence], max_len: usize) -> Result<(Vec<usize>, Vec<bool>, usize)> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let l = first.ids.len();
    if l > max_len {
        return Err(Error::shape(format!("sequence length {l} exceeds max_len {max_len}")));
    }
    let mut ids = Vec::with_capacity(batch.len() * l);
    let mut mask = Vec::with_capacity(batch.len() * l);
    for (i, t) in batch.iter().enumerate() {
        if t.ids.len() != l || t.attention_mask.len() != l {
            return Err(Error::shape(format!(
                "batch item {i} has length {} but item 0 has {l}",
                t.ids.len()
            )));
        }
        ids.extend_from_slice(&t.ids);
        mask.extend(t.attention_mask.iter().map(|&m| m == 1));
    }
    Ok((ids, mask, l))
}
