//! Small-scale protein language modelling: a reverse-mode autodiff engine,
//! a residue tokenizer, a masked-LM transformer encoder with task heads, a
//! latent-conditioned sequence generator, and the data, metric and
//! checkpoint plumbing around them. Everything runs on one CPU thread and is
//! a deterministic function of its seeds.

pub mod benchmark;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod generative;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod tokenizer;

pub use benchmark::{run_benchmark, BenchmarkReport, ReferenceScores};
pub use checkpoint::{Checkpoint, ModelKind, TaskBundle};
pub use config::RunConfig;
pub use data::{Dataset, FastaRecord, SplitName, TaskKind, TaskSpec};
pub use error::{Error, ErrorCategory, Result};
pub use generative::{DecoderModel, GenerationConfig, GenerationReport, LatentVector, Sampling, VariationalHead};
pub use metrics::{Metric, MetricResult};
pub use model::{EncoderConfig, EncoderModel, TaskHead, TrainRunReport};
pub use rng::Rng;
pub use tokenizer::{TokenSequence, Vocabulary};
