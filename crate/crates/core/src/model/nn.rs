//! Parameter-owning layers shared by the encoder and the decoder.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; `forward` records onto a
//! [`Tape`]. All weights are `[in, out]` so that `y = x W + b`.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{AttentionMask, ParamId, ParamStore, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f32 = 1e-5;

pub(crate) fn init_normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.truncated_normal(INIT_STD) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Source of dropout masks. Inactive in evaluation mode.
pub struct Dropout<'a> {
    rate: f32,
    rng: Option<&'a mut Rng>,
}

impl<'a> Dropout<'a> {
    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f32, rng: &'a mut Rng) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let rate = self.rate;
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let n = tape.value(x).len();
                let keep: Vec<bool> = (0..n).map(|_| !rng.bernoulli(rate as f64)).collect();
                tape.dropout(x, &keep, rate)
            }
            _ => Ok(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), init_normal(rng, &[inputs, outputs]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    pub fn num_params(inputs: usize, outputs: usize) -> usize {
        inputs * outputs + outputs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Post-norm transformer block: `x = LN(x + Attn(x)); x = LN(x + FFN(x))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
    pub heads: usize,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, ffn: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.attn.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.attn.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.attn.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.attn.output"), d, d, rng),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            ffn_in: Linear::new(store, &format!("{name}.ffn.in"), d, ffn, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn.out"), ffn, d, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
            heads,
        }
    }

    pub fn num_params(d: usize, ffn: usize) -> usize {
        4 * Linear::num_params(d, d) + Linear::num_params(d, ffn) + Linear::num_params(ffn, d) + 4 * d
    }

    /// `x` is `[B, L, d]`; `mask.heads` must equal `self.heads`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: &AttentionMask,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let attn = self.attention(tape, store, x, mask)?;
        let attn = dropout.apply(tape, attn)?;
        let x = tape.add(x, attn)?;
        let x = self.attn_norm.forward(tape, store, x)?;

        let h = self.ffn_in.forward(tape, store, x)?;
        let h = tape.gelu(h);
        let h = self.ffn_out.forward(tape, store, h)?;
        let h = dropout.apply(tape, h)?;
        let x = tape.add(x, h)?;
        self.ffn_norm.forward(tape, store, x)
    }

    fn attention(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: &AttentionMask) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let dh = d / h;
        let split = |tape: &mut Tape, t: Var| -> Result<Var> {
            let t = tape.reshape(t, &[b, l, h, dh])?;
            let t = tape.permute(t, &[0, 2, 1, 3])?;
            tape.reshape(t, &[b * h, l, dh])
        };
        let q = self.query.forward(tape, store, x)?;
        let q = split(tape, q)?;
        let k = self.key.forward(tape, store, x)?;
        let k = split(tape, k)?;
        let v = self.value.forward(tape, store, x)?;
        let v = split(tape, v)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt());
        let probs = tape.attention_softmax(scores, mask)?;
        let ctx = tape.batch_matmul(probs, v, false)?;
        let ctx = tape.reshape(ctx, &[b, h, l, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, l, d])?;
        self.output.forward(tape, store, ctx)
    }
}
