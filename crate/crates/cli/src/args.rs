use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use protlm::TaskKind;

#[derive(Debug, Parser)]
#[command(
    name = "protlm",
    version,
    about = "Pretrain, fine-tune, evaluate and sample small protein language models",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration sources shared by every subcommand. Later sources win:
/// defaults, then `--config`, then `--set` in order, then dedicated flags.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct ConfigArgs {
    /// Key-value configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Write a synthetic task CSV or a synthetic FASTA corpus.
    MakeSynthetic(MakeSyntheticArgs),
    /// Masked-LM pretraining of a fresh encoder on a FASTA corpus.
    Pretrain(PretrainArgs),
    /// Train a task head (and optionally the encoder) on a task CSV.
    Finetune(FinetuneArgs),
    /// Score a fine-tuned checkpoint on the test split of a task CSV.
    Evaluate(EvaluateArgs),
    /// Train the latent head and decoder on a FASTA corpus, encoder frozen.
    TrainDecoder(TrainDecoderArgs),
    /// Decode noisy latents around seed sequences.
    Generate(GenerateArgs),
    /// Re-run a recorded command and check its outputs are bit-identical.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    SequenceClassification,
    TokenClassification,
    SequenceRegression,
    /// Unlabelled FASTA corpus of mutated ancestor families.
    Corpus,
}

impl SyntheticKind {
    pub fn task_kind(self) -> Option<TaskKind> {
        match self {
            SyntheticKind::SequenceClassification => Some(TaskKind::SequenceClassification),
            SyntheticKind::TokenClassification => Some(TaskKind::TokenClassification),
            SyntheticKind::SequenceRegression => Some(TaskKind::SequenceRegression),
            SyntheticKind::Corpus => None,
        }
    }
}

fn parse_task_kind(s: &str) -> Result<TaskKind, String> {
    s.parse::<TaskKind>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct MakeSyntheticArgs {
    #[arg(long, value_enum)]
    pub task_kind: SyntheticKind,
    /// Number of records.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub task_csv: PathBuf,
    #[arg(long, value_parser = parse_task_kind)]
    pub task_kind: TaskKind,
    /// Classes for sequence classification (default 2).
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub freeze_encoder: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub task_csv: PathBuf,
    /// JSON report path; a one-row CSV is written next to it.
    #[arg(long)]
    pub report: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainDecoderArgs {
    /// Encoder checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    /// Encoder checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub decoder_ckpt: PathBuf,
    #[arg(long)]
    pub seed_fasta: PathBuf,
    /// Comma-separated noise scales, e.g. 0,0.5,1,2.
    #[arg(long)]
    pub sigma_grid: Option<String>,
    /// Samples per seed and noise scale.
    #[arg(long)]
    pub n: Option<usize>,
    /// Decode greedily instead of sampling.
    #[arg(long)]
    pub greedy: bool,
    /// Generator epochs on the seed sequences before decoding.
    #[arg(long)]
    pub seed_finetune_epochs: Option<usize>,
    /// Writes `<prefix>.fasta`, `<prefix>.csv` and `<prefix>.json`.
    #[arg(long)]
    pub out_prefix: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for the re-run outputs (default: `replay` next to the manifest).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeSynthetic(_) => "make-synthetic",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Evaluate(_) => "evaluate",
            Command::TrainDecoder(_) => "train-decoder",
            Command::Generate(_) => "generate",
            Command::Replay(_) => "replay",
        }
    }

    pub fn config_args(&self) -> Option<&ConfigArgs> {
        match self {
            Command::MakeSynthetic(a) => Some(&a.cfg),
            Command::Pretrain(a) => Some(&a.cfg),
            Command::Finetune(a) => Some(&a.cfg),
            Command::Evaluate(a) => Some(&a.cfg),
            Command::TrainDecoder(a) => Some(&a.cfg),
            Command::Generate(a) => Some(&a.cfg),
            Command::Replay(_) => None,
        }
    }

    /// Overrides implied by dedicated flags, applied after `--set`.
    pub fn flag_overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            Command::Finetune(a) if a.freeze_encoder => out.push("finetune.freeze_encoder=true".into()),
            Command::Generate(a) => {
                if let Some(g) = &a.sigma_grid {
                    out.push(format!("generation.sigma_grid={g}"));
                }
                if let Some(n) = a.n {
                    out.push(format!("generation.num_samples={n}"));
                }
                if a.greedy {
                    out.push("generation.sampling=greedy".into());
                }
                if let Some(e) = a.seed_finetune_epochs {
                    out.push(format!("generation.seed_finetune_epochs={e}"));
                }
            }
            _ => {}
        }
        out
    }

    /// Output paths, so a replay can redirect them.
    pub fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            Command::MakeSynthetic(a) => vec![&mut a.out],
            Command::Pretrain(a) => vec![&mut a.out],
            Command::Finetune(a) => vec![&mut a.out],
            Command::Evaluate(a) => vec![&mut a.report],
            Command::TrainDecoder(a) => vec![&mut a.out],
            Command::Generate(a) => vec![&mut a.out_prefix],
            Command::Replay(_) => vec![],
        }
    }
}
