use serde::{Deserialize, Serialize};

use super::latent::LatentVector;
use crate::error::{Error, Result};
use crate::model::nn::{init_normal, Block, Dropout, LayerNorm, Linear};
use crate::rng::Rng;
use crate::tensor::{AttentionMask, ParamId, ParamStore, Tape, Var};
use crate::tokenizer::{decode, encode, FIRST_RESIDUE, IGNORE_INDEX, PAD, SEP, VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    /// Token budget including `[CLS]` and `[SEP]`.
    pub max_len: usize,
    pub z_dim: usize,
    pub dropout_rate: f32,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            hidden_dim: 64,
            ffn_dim: 256,
            max_len: 128,
            z_dim: 32,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.num_layers, self.num_heads, self.hidden_dim, self.ffn_dim, self.z_dim];
        if dims.contains(&0) {
            return Err(Error::config(format!("decoder dimensions must be positive: {self:?}")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::config("decoder max_len must be at least 3"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Latent projection, token and position tables (the prefix takes one
    /// extra position), embedding norm, blocks, output head.
    pub fn num_params(&self) -> usize {
        let (v, d) = (VOCAB_SIZE, self.hidden_dim);
        Linear::num_params(self.z_dim, d)
            + v * d
            + self.max_len * d
            + 2 * d
            + self.num_layers * Block::num_params(d, self.ffn_dim)
            + Linear::num_params(d, v)
    }
}

/// Causal transformer over `[prefix(z), CLS, residues...]`. The output at
/// `[CLS]` predicts the first residue and the output at the last residue
/// predicts `[SEP]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    pub params: ParamStore,
    latent_proj: Linear,
    token_embedding: ParamId,
    position_embedding: ParamId,
    embed_norm: LayerNorm,
    blocks: Vec<Block>,
    output: Linear,
}

/// How the next token is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum Sampling {
    Greedy,
    Temperature { tau: f32 },
}

impl Sampling {
    pub fn validate(&self) -> Result<()> {
        match self {
            Sampling::Temperature { tau } if !(*tau > 0.0 && tau.is_finite()) => {
                Err(Error::config(format!("temperature must be positive, got {tau}")))
            }
            _ => Ok(()),
        }
    }
}

/// One teacher-forced batch: inputs without `[SEP]`, targets shifted by one.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBatch {
    /// `[B, T]` token ids starting with `[CLS]`, padded with `[PAD]`.
    pub inputs: Vec<usize>,
    /// `[B, T + 1]` next-token targets aligned with the prefix-extended input.
    pub targets: Vec<i64>,
    /// `[B, T + 1]` key validity including the prefix.
    pub key_valid: Vec<bool>,
    pub batch: usize,
    pub tokens: usize,
}

impl TeacherBatch {
    pub fn new(sequences: &[&str], max_len: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::invalid("empty decoder batch"));
        }
        let encoded = sequences
            .iter()
            .map(|s| encode(s, max_len))
            .collect::<Result<Vec<_>>>()?;
        // inputs are CLS + residues, i.e. everything but SEP
        let t = encoded.iter().map(|e| e.true_length - 1).max().expect("non-empty");
        let b = encoded.len();
        let mut inputs = vec![PAD; b * t];
        let mut targets = vec![IGNORE_INDEX; b * (t + 1)];
        let mut key_valid = vec![false; b * (t + 1)];
        for (i, e) in encoded.iter().enumerate() {
            let n = e.true_length - 1;
            inputs[i * t..i * t + n].copy_from_slice(&e.ids[..n]);
            key_valid[i * (t + 1)..i * (t + 1) + n + 1].fill(true);
            for j in 0..n {
                // position j + 1 holds ids[j] and predicts ids[j + 1]
                targets[i * (t + 1) + j + 1] = e.ids[j + 1] as i64;
            }
        }
        Ok(Self {
            inputs,
            targets,
            key_valid,
            batch: b,
            tokens: t,
        })
    }
}

impl DecoderModel {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut params = ParamStore::new();
        let d = config.hidden_dim;
        let latent_proj = Linear::new(&mut params, "decoder.latent", config.z_dim, d, &mut rng);
        let token_embedding = params.add("decoder.embed.token", init_normal(&mut rng, &[VOCAB_SIZE, d]));
        let position_embedding = params.add("decoder.embed.position", init_normal(&mut rng, &[config.max_len, d]));
        let embed_norm = LayerNorm::new(&mut params, "decoder.embed.norm", d);
        let blocks = (0..config.num_layers)
            .map(|i| {
                Block::new(
                    &mut params,
                    &format!("decoder.layer{i}"),
                    d,
                    config.ffn_dim,
                    config.num_heads,
                    &mut rng,
                )
            })
            .collect();
        let output = Linear::new(&mut params, "decoder.output", d, VOCAB_SIZE, &mut rng);
        Ok(Self {
            config,
            params,
            latent_proj,
            token_embedding,
            position_embedding,
            embed_norm,
            blocks,
            output,
        })
    }

    pub fn from_params(config: DecoderConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.params.copy_values_from(&params)?;
        Ok(model)
    }

    /// Logits `[B, T + 1, V]` for latent `z` `[B, z_dim]` and input ids
    /// `[B, T]`. Position 0 is the latent prefix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        z: Var,
        inputs: &[usize],
        key_valid: &[bool],
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let zs = tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.config.z_dim || zs[0] == 0 || !inputs.len().is_multiple_of(zs[0]) {
            return Err(Error::shape(format!(
                "decoder latent {zs:?} with {} input ids",
                inputs.len()
            )));
        }
        let (b, d) = (zs[0], self.config.hidden_dim);
        let t = inputs.len() / b;
        if t + 1 > self.config.max_len || key_valid.len() != b * (t + 1) {
            return Err(Error::shape(format!(
                "decoder input of {t} tokens (max {}) with {} key flags",
                self.config.max_len - 1,
                key_valid.len()
            )));
        }
        let prefix = self.latent_proj.forward(tape, &self.params, z)?;
        let prefix = tape.reshape(prefix, &[b, 1, d])?;
        let table = tape.param(&self.params, self.token_embedding);
        let tok = tape.embedding(table, inputs)?;
        let tok = tape.reshape(tok, &[b, t, d])?;
        let x = tape.concat(&[prefix, tok], 1)?;
        let pos_table = tape.param(&self.params, self.position_embedding);
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t + 1).collect();
        let pos = tape.embedding(pos_table, &positions)?;
        let pos = tape.reshape(pos, &[b, t + 1, d])?;
        let x = tape.add(x, pos)?;
        let x = self.embed_norm.forward(tape, &self.params, x)?;
        let mut x = dropout.apply(tape, x)?;
        let mask = AttentionMask {
            heads: self.config.num_heads,
            key_valid: Some(key_valid.to_vec()),
            causal: true,
        };
        for block in &self.blocks {
            x = block.forward(tape, &self.params, x, &mask, dropout)?;
        }
        self.output.forward(tape, &self.params, x)
    }

    /// Mean next-token cross-entropy under teacher forcing.
    pub fn reconstruction_loss(
        &self,
        tape: &mut Tape,
        z: Var,
        batch: &TeacherBatch,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let logits = self.forward(tape, z, &batch.inputs, &batch.key_valid, dropout)?;
        let flat = tape.reshape(logits, &[batch.targets.len(), VOCAB_SIZE])?;
        tape.cross_entropy(flat, &batch.targets, IGNORE_INDEX)
    }

    /// Decode one sequence per latent sample. Each output has at most
    /// `max_len - 2` residues, capped by the decoder's own budget.
    /// Temperature sampling for row `i` uses `Rng::derive(seed, i)`.
    pub fn generate(&self, latents: &[LatentVector], sampling: Sampling, max_len: usize, seed: u64) -> Result<Vec<String>> {
        sampling.validate()?;
        if max_len < 3 {
            return Err(Error::invalid(format!("generation max_len must be at least 3, got {max_len}")));
        }
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(z) = latents.iter().find(|z| z.dim() != self.config.z_dim || !z.is_finite()) {
            return Err(Error::invalid(format!(
                "latent of dimension {} (finite: {}) for a decoder with z_dim {}",
                z.dim(),
                z.is_finite(),
                self.config.z_dim
            )));
        }
        let budget = max_len.min(self.config.max_len) - 2;
        let b = latents.len();
        let z_flat: Vec<f32> = latents.iter().flat_map(|z| z.sample.iter().copied()).collect();
        let mut rngs: Vec<Rng> = (0..b).map(|i| Rng::derive(seed, i as u64)).collect();
        let mut seqs: Vec<Vec<usize>> = vec![vec![crate::tokenizer::CLS]; b];
        let mut done = vec![false; b];
        for _ in 0..=budget {
            if done.iter().all(|d| *d) {
                break;
            }
            let t = seqs[0].len();
            let inputs: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
            let key_valid = vec![true; b * (t + 1)];
            let mut tape = Tape::new();
            let z = tape.constant(vec![b, self.config.z_dim], z_flat.clone())?;
            let logits = self.forward(&mut tape, z, &inputs, &key_valid, &mut Dropout::eval())?;
            let values = tape.value(logits);
            for i in 0..b {
                if done[i] {
                    seqs[i].push(PAD);
                    continue;
                }
                let row = &values[(i * (t + 1) + t) * VOCAB_SIZE..(i * (t + 1) + t + 1) * VOCAB_SIZE];
                let residues = seqs[i].len() - 1;
                let next = if residues >= budget {
                    SEP
                } else {
                    choose(row, residues > 0, sampling, &mut rngs[i])
                };
                if next == SEP {
                    done[i] = true;
                }
                seqs[i].push(next);
            }
        }
        seqs.iter()
            .map(|s| {
                let end = s.iter().position(|&id| id == SEP || id == PAD).unwrap_or(s.len());
                decode(&s[..end])
            })
            .collect()
    }
}

/// Pick among residue tokens, plus `[SEP]` when `allow_stop`.
fn choose(row: &[f32], allow_stop: bool, sampling: Sampling, rng: &mut Rng) -> usize {
    let mut candidates: Vec<usize> = (FIRST_RESIDUE..VOCAB_SIZE).collect();
    if allow_stop {
        candidates.push(SEP);
    }
    match sampling {
        Sampling::Greedy => {
            let mut best = candidates[0];
            for &c in &candidates[1..] {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        }
        Sampling::Temperature { tau } => {
            let scaled: Vec<f64> = candidates.iter().map(|&c| row[c] as f64 / tau as f64).collect();
            let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.uniform() * total;
            for (c, w) in candidates.iter().zip(&weights) {
                if u < *w {
                    return *c;
                }
                u -= w;
            }
            *candidates.last().expect("non-empty")
        }
    }
}
