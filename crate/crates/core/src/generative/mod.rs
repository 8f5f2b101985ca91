//! Latent-variable sequence generation: a variational bottleneck over frozen
//! encoder embeddings and a latent-conditioned causal decoder.

pub mod campaign;
pub mod decoder;
pub mod latent;
pub mod train;

pub use campaign::{seed_generation_campaign, GenerationConfig, GenerationReport, GenerationRow, SeedGenerator, SigmaSummary};
pub use decoder::{DecoderConfig, DecoderModel, Sampling, TeacherBatch};
pub use latent::{encode_latent, kl_divergence, perturb, LatentVector, VaeHeadConfig, VariationalHead};
pub use train::{train_vae, VaeTrainConfig};
