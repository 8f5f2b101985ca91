use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::decoder::{DecoderModel, TeacherBatch};
use super::latent::{kl_term, reparameterize, VariationalHead};
use crate::error::{Error, Result};
use crate::model::nn::Dropout;
use crate::model::train::check_loss;
use crate::model::{EncoderModel, TrainRunReport};
use crate::rng::Rng;
use crate::tensor::{Adam, AdamHyper, Tape, Tensor};
use crate::tokenizer::encode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    /// At most this many corpus sequences are used (the first ones).
    pub corpus_cap: usize,
    /// Final KL weight beta.
    pub kl_weight: f32,
    /// Fraction of all steps over which beta ramps linearly from 0.
    pub warmup_fraction: f32,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            corpus_cap: 2_000,
            kl_weight: 0.1,
            warmup_fraction: 0.2,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl VaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::config(format!("kl_weight must be >= 0, got {}", self.kl_weight)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.corpus_cap == 0 {
            return Err(Error::config("batch_size and corpus_cap must be positive"));
        }
        Ok(())
    }

    /// KL weight at `step` of `total`.
    pub fn beta_at(&self, step: usize, total: usize) -> f32 {
        let ramp = self.warmup_fraction * total as f32;
        if ramp <= 0.0 {
            self.kl_weight
        } else {
            self.kl_weight * ((step + 1) as f32 / ramp).min(1.0)
        }
    }
}

/// Train the variational head and decoder on `corpus` with the encoder
/// frozen. Loss per step is `recon + beta * kl`; both terms are recorded.
pub fn train_vae(
    encoder: &EncoderModel,
    head: &mut VariationalHead,
    decoder: &mut DecoderModel,
    corpus: &[String],
    cfg: &VaeTrainConfig,
) -> Result<TrainRunReport> {
    let started = Instant::now();
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("generator training corpus is empty"));
    }
    if head.config.input_dim != encoder.hidden_dim() || head.config.z_dim != decoder.config.z_dim {
        return Err(Error::shape("encoder, variational head and decoder dimensions disagree"));
    }
    let corpus = &corpus[..corpus.len().min(cfg.corpus_cap)];
    let too_long = corpus.iter().position(|s| s.len() + 2 > decoder.config.max_len);
    if let Some(i) = too_long {
        return Err(Error::invalid(format!(
            "corpus sequence {i} has {} residues; the decoder fits {}",
            corpus[i].len(),
            decoder.config.max_len - 2
        )));
    }

    // The encoder is only read, so its parameters cannot change.
    let d = encoder.hidden_dim();
    let mut pooled = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(cfg.batch_size) {
        let tokens = chunk
            .iter()
            .map(|s| encode(s, encoder.config.max_len))
            .collect::<Result<Vec<_>>>()?;
        let len = tokens.iter().map(|t| t.true_length).max().unwrap_or(0);
        let tokens = tokens.iter().map(|t| t.repadded(len)).collect::<Result<Vec<_>>>()?;
        let p = encoder.embed_pooled(&tokens)?;
        pooled.extend(p.data().chunks(d).map(<[f32]>::to_vec));
    }

    head.params.set_requires_grad(true);
    decoder.params.set_requires_grad(true);
    let hyper = AdamHyper::with_lr(cfg.lr);
    let mut head_adam = Adam::new(&head.params, hyper);
    let mut dec_adam = Adam::new(&decoder.params, hyper);
    let mut order_rng = Rng::derive(cfg.seed, 1);
    let mut noise_rng = Rng::derive(cfg.seed, 2);
    let mut dropout_rng = Rng::derive(cfg.seed, 3);
    let per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut loss_trace = Vec::with_capacity(total);
    let mut recon_trace = Vec::with_capacity(total);
    let mut kl_trace = Vec::with_capacity(total);
    let mut beta_trace = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let z_dim = head.config.z_dim;

    for _ in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        for idx in order.chunks(cfg.batch_size) {
            let step = loss_trace.len();
            let beta = cfg.beta_at(step, total);
            let seqs: Vec<&str> = idx.iter().map(|&i| corpus[i].as_str()).collect();
            let batch = TeacherBatch::new(&seqs, decoder.config.max_len)?;
            let x: Vec<f32> = idx.iter().flat_map(|&i| pooled[i].iter().copied()).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::new(vec![idx.len(), d], x)?);
            let (mu, logvar) = head.forward(&mut tape, x)?;
            let eps: Vec<f32> = (0..idx.len() * z_dim).map(|_| noise_rng.normal() as f32).collect();
            let z = reparameterize(&mut tape, mu, logvar, eps)?;
            let mut dropout = Dropout::train(decoder.config.dropout_rate, &mut dropout_rng);
            let recon = decoder.reconstruction_loss(&mut tape, z, &batch, &mut dropout)?;
            let kl = kl_term(&mut tape, mu, logvar)?;
            let weighted = tape.scale(kl, beta);
            let loss = tape.add(recon, weighted)?;
            loss_trace.push(check_loss(tape.scalar(loss), step)?);
            recon_trace.push(tape.scalar(recon) as f64);
            kl_trace.push(tape.scalar(kl) as f64);
            beta_trace.push(beta as f64);
            head.params.zero_grad();
            decoder.params.zero_grad();
            tape.backward_into(loss, &mut [&mut head.params, &mut decoder.params])?;
            head_adam.step(&mut head.params)?;
            dec_adam.step(&mut decoder.params)?;
        }
    }
    head.params.zero_grad();
    decoder.params.zero_grad();

    let mut components = BTreeMap::new();
    components.insert("reconstruction".to_string(), recon_trace);
    components.insert("kl".to_string(), kl_trace);
    components.insert("beta".to_string(), beta_trace);
    Ok(TrainRunReport {
        run: "train_vae".into(),
        seed: cfg.seed,
        loss_trace,
        components,
        metrics: BTreeMap::new(),
        config: serde_json::json!({
            "encoder": encoder.config,
            "vae_head": head.config,
            "decoder": decoder.config,
            "vae": cfg,
        }),
        wall_clock: started.elapsed(),
    })
}
