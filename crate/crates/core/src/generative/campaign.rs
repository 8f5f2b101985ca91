use std::io::Write;

use serde::{Deserialize, Serialize};

use super::decoder::{DecoderModel, Sampling};
use super::latent::{encode_latent, perturb, VariationalHead};
use crate::data::FastaRecord;
use crate::error::{Error, Result};
use crate::metrics::sequence_identity;
use crate::model::EncoderModel;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub sigma_grid: Vec<f64>,
    pub num_samples: usize,
    pub sampling: Sampling,
    /// Token budget; outputs have at most `max_len - 2` residues.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            sigma_grid: vec![0.0, 0.5, 1.0, 2.0],
            num_samples: 20,
            sampling: Sampling::Temperature { tau: 1.0 },
            max_len: 128,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        if self.sigma_grid.is_empty() || self.sigma_grid.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::config(format!(
                "sigma grid must be non-empty with finite values >= 0, got {:?}",
                self.sigma_grid
            )));
        }
        if self.num_samples == 0 || self.max_len < 3 {
            return Err(Error::config("num_samples must be positive and max_len at least 3"));
        }
        Ok(())
    }
}

/// The three trained pieces needed to go from a seed sequence to new ones.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedGenerator {
    pub encoder: EncoderModel,
    pub vae: VariationalHead,
    pub decoder: DecoderModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub seed_id: String,
    pub sigma: f64,
    pub sample_idx: usize,
    pub length: usize,
    pub identity: f64,
    pub sequence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSummary {
    pub sigma: f64,
    pub mean_identity: f64,
    /// Standard error of the mean (sample standard deviation / sqrt(n)).
    pub std_error: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub rows: Vec<GenerationRow>,
    pub summary: Vec<SigmaSummary>,
    pub config: GenerationConfig,
}

pub const CSV_HEADER: &str = "seed_id,sigma,sample_idx,length,identity";

impl GenerationReport {
    /// Headers are `seed=<id> sigma=<val> idx=<n>`.
    pub fn write_fasta<W: Write>(&self, out: W) -> Result<()> {
        let records: Vec<FastaRecord> = self
            .rows
            .iter()
            .map(|r| {
                FastaRecord::new(
                    format!("seed={} sigma={} idx={}", r.seed_id, r.sigma, r.sample_idx),
                    r.sequence.clone(),
                )
            })
            .collect();
        crate::data::write_fasta(&records, out, 60)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.seed_id, r.sigma, r.sample_idx, r.length, r.identity
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// First whitespace-separated word of the header, or `seed<i>` when empty.
/// Commas are replaced so the id stays a single CSV field.
pub fn seed_id(record: &FastaRecord, index: usize) -> String {
    match record.header.split_whitespace().next() {
        Some(w) => w.replace(',', "_"),
        None => format!("seed{index}"),
    }
}

/// For every seed and sigma, decode `num_samples` sequences from the seed's
/// deterministic latent plus `sigma`-scaled Gaussian noise, and score their
/// identity to the seed.
pub fn seed_generation_campaign(
    generator: &SeedGenerator,
    seeds: &[FastaRecord],
    cfg: &GenerationConfig,
) -> Result<GenerationReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::invalid("no seed sequences"));
    }
    let grid = cfg.sigma_grid.len();
    let n = cfg.num_samples;
    let mut rows = Vec::with_capacity(seeds.len() * grid * n);
    for (i, rec) in seeds.iter().enumerate() {
        let id = seed_id(rec, i);
        let z0 = encode_latent(&generator.encoder, &generator.vae, &rec.sequence, false, 0)?;
        for (j, &sigma) in cfg.sigma_grid.iter().enumerate() {
            let cell = ((i * grid + j) * n) as u64;
            let latents = (0..n)
                .map(|k| perturb(&z0, sigma, Rng::derive(cfg.seed, cell + k as u64).next_u64()))
                .collect::<Result<Vec<_>>>()?;
            let decode_seed = Rng::derive(cfg.seed ^ 0xdec0de, cell).next_u64();
            let outputs = generator
                .decoder
                .generate(&latents, cfg.sampling, cfg.max_len, decode_seed)?;
            for (k, seq) in outputs.into_iter().enumerate() {
                let identity = if seq.is_empty() {
                    0.0
                } else {
                    sequence_identity(&seq, &rec.sequence)?
                };
                rows.push(GenerationRow {
                    seed_id: id.clone(),
                    sigma,
                    sample_idx: k,
                    length: seq.len(),
                    identity,
                    sequence: seq,
                });
            }
        }
    }
    let summary = summarize(&rows, &cfg.sigma_grid);
    Ok(GenerationReport {
        rows,
        summary,
        config: cfg.clone(),
    })
}

pub fn summarize(rows: &[GenerationRow], sigma_grid: &[f64]) -> Vec<SigmaSummary> {
    sigma_grid
        .iter()
        .map(|&sigma| {
            let vals: Vec<f64> = rows.iter().filter(|r| r.sigma == sigma).map(|r| r.identity).collect();
            let count = vals.len();
            let mean = vals.iter().sum::<f64>() / count.max(1) as f64;
            let std_error = if count > 1 {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
                (var / count as f64).sqrt()
            } else {
                0.0
            };
            SigmaSummary {
                sigma,
                mean_identity: mean,
                std_error,
                count,
            }
        })
        .collect()
}
