use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::nn::Linear;
use crate::model::EncoderModel;
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tape, Var};
use crate::tokenizer::encode;

pub const LOGVAR_MIN: f32 = -20.0;
pub const LOGVAR_MAX: f32 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeHeadConfig {
    pub input_dim: usize,
    pub z_dim: usize,
    pub seed: u64,
}

/// Two linear maps from a pooled embedding to `mu` and `logvar`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalHead {
    pub config: VaeHeadConfig,
    pub params: ParamStore,
    mu: Linear,
    logvar: Linear,
}

impl VariationalHead {
    pub fn new(config: VaeHeadConfig) -> Result<Self> {
        if config.input_dim == 0 || config.z_dim == 0 {
            return Err(Error::config("variational head dimensions must be positive"));
        }
        let mut rng = Rng::new(config.seed);
        let mut params = ParamStore::new();
        let mu = Linear::new(&mut params, "vae.mu", config.input_dim, config.z_dim, &mut rng);
        let logvar = Linear::new(&mut params, "vae.logvar", config.input_dim, config.z_dim, &mut rng);
        Ok(Self {
            config,
            params,
            mu,
            logvar,
        })
    }

    pub fn from_params(config: VaeHeadConfig, params: ParamStore) -> Result<Self> {
        let mut head = Self::new(config)?;
        head.params.copy_values_from(&params)?;
        Ok(head)
    }

    /// `(mu, logvar)` for pooled input `[B, d]`; logvar is clamped to
    /// `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn forward(&self, tape: &mut Tape, pooled: Var) -> Result<(Var, Var)> {
        let mu = self.mu.forward(tape, &self.params, pooled)?;
        let lv = self.logvar.forward(tape, &self.params, pooled)?;
        let lv = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        Ok((mu, lv))
    }
}

/// Reparameterized sample `z = mu + exp(logvar / 2) * eps` on the tape.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, eps: Vec<f32>) -> Result<Var> {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let noise = tape.mul_const(std, eps)?;
    tape.add(mu, noise)
}

/// `0.5 * sum(exp(logvar) + mu^2 - 1 - logvar)` averaged over the batch rows.
pub fn kl_term(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let rows = tape.shape(mu)[0];
    let var = tape.exp(logvar);
    let mu2 = tape.mul(mu, mu)?;
    let t = tape.add(var, mu2)?;
    let t = tape.sub(t, logvar)?;
    let t = tape.affine(t, 1.0, -1.0);
    let s = tape.sum(t);
    Ok(tape.scale(s, 0.5 / rows as f32))
}

/// Closed-form KL divergence of `N(mu, exp(logvar))` from `N(0, I)`.
pub fn kl_divergence(mu: &[f32], logvar: &[f32]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (lv.exp() + m * m - 1.0 - lv)
        })
        .sum()
}

/// A latent code with its provenance. `eps` is the standard-normal draw that
/// produced `sample` from `mu` and `logvar` (all zeros when noise was off).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
    pub sample: Vec<f32>,
    pub eps: Vec<f32>,
}

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn is_finite(&self) -> bool {
        [&self.mu, &self.logvar, &self.sample].iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Encode one sequence to its latent code. With `noise_on` the sample draws
/// `eps` from `seed`; otherwise `sample == mu`.
pub fn encode_latent(
    encoder: &EncoderModel,
    head: &VariationalHead,
    sequence: &str,
    noise_on: bool,
    seed: u64,
) -> Result<LatentVector> {
    let tokens = encode(sequence, encoder.config.max_len)?;
    let pooled = encoder.embed_pooled(std::slice::from_ref(&tokens))?;
    let mut tape = Tape::new();
    let x = tape.leaf(&pooled);
    let (mu, lv) = head.forward(&mut tape, x)?;
    let mu = tape.value(mu).to_vec();
    let logvar = tape.value(lv).to_vec();
    let (sample, eps) = if noise_on {
        let mut rng = Rng::new(seed);
        let eps: Vec<f32> = (0..mu.len()).map(|_| rng.normal() as f32).collect();
        let sample = mu
            .iter()
            .zip(&logvar)
            .zip(&eps)
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect();
        (sample, eps)
    } else {
        (mu.clone(), vec![0.0; mu.len()])
    };
    Ok(LatentVector {
        mu,
        logvar,
        sample,
        eps,
    })
}

/// `sample + sigma * eps` with fresh `eps ~ N(0, I)`; `mu`, `logvar` and the
/// recorded `eps` are carried over unchanged.
pub fn perturb(z: &LatentVector, sigma: f64, seed: u64) -> Result<LatentVector> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise scale must be finite and >= 0, got {sigma}")));
    }
    let mut rng = Rng::new(seed);
    let sample = z
        .sample
        .iter()
        .map(|&s| (s as f64 + sigma * rng.normal()) as f32)
        .collect();
    Ok(LatentVector {
        sample,
        ..z.clone()
    })
}
