//! Run configuration: one flat `key = value` document covering every stage.
//!
//! Keys are dotted (`section.field`); `#` starts a comment outside quotes.
//! Every key has a default, unknown keys are rejected, and values are typed
//! by their default: integers, floats, booleans, strings, or comma-separated
//! number lists (brackets optional). Component seeds are derived from the
//! single top-level `seed`.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};
use crate::generative::{DecoderConfig, GenerationConfig, Sampling, VaeHeadConfig, VaeTrainConfig};
use crate::model::{EncoderConfig, FinetuneConfig, PretrainConfig};
use crate::rng::Rng;
use crate::tensor::AdamHyper;
use crate::tokenizer::{MaskingPolicy, VOCAB_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingSection {
    pub select_rate: f64,
    pub mask_rate: f64,
    pub random_rate: f64,
    pub keep_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub eval_mask_draws: usize,
    pub heldout_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub encoder_lr: f32,
    pub head_lr: f32,
    pub freeze_encoder: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSection {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub z_dim: usize,
    pub dropout: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeSection {
    pub epochs: usize,
    pub corpus_cap: usize,
    pub kl_weight: f32,
    pub warmup_fraction: f32,
    pub lr: f32,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    pub sigma_grid: Vec<f64>,
    pub num_samples: usize,
    /// `greedy` or `temperature`.
    pub sampling: String,
    pub temperature: f32,
    pub max_len: usize,
    pub seed_finetune_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub min_len: usize,
    pub max_len: usize,
    pub families: usize,
    pub mutation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderSection,
    pub masking: MaskingSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub decoder: DecoderSection,
    pub vae: VaeSection,
    pub generation: GenerationSection,
    pub synthetic: SyntheticSection,
}

/// Every key with a one-line description, in document order.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "master seed; every component seed is derived from it"),
    ("encoder.num_layers", "transformer blocks in the encoder"),
    ("encoder.num_heads", "attention heads per block"),
    ("encoder.hidden_dim", "model width d"),
    ("encoder.ffn_dim", "feed-forward inner width"),
    ("encoder.max_len", "token budget including [CLS] and [SEP]"),
    ("encoder.dropout", "dropout rate during training"),
    ("masking.select_rate", "fraction of residue positions selected for prediction"),
    ("masking.mask_rate", "selected positions replaced by [MASK]"),
    ("masking.random_rate", "selected positions replaced by a random residue"),
    ("masking.keep_rate", "selected positions left unchanged"),
    ("pretrain.steps", "optimizer steps"),
    ("pretrain.batch_size", "sequences per step"),
    ("pretrain.lr", "Adam learning rate"),
    ("pretrain.beta1", "Adam first-moment decay"),
    ("pretrain.beta2", "Adam second-moment decay"),
    ("pretrain.eps", "Adam denominator epsilon"),
    ("pretrain.eval_mask_draws", "masking draws averaged for masked accuracy"),
    ("pretrain.heldout_fraction", "corpus fraction held out for evaluation"),
    ("finetune.epochs", "passes over the training split"),
    ("finetune.batch_size", "records per step"),
    ("finetune.encoder_lr", "encoder learning rate"),
    ("finetune.head_lr", "task head learning rate"),
    ("finetune.freeze_encoder", "train the head only"),
    ("decoder.num_layers", "transformer blocks in the decoder"),
    ("decoder.num_heads", "attention heads per block"),
    ("decoder.hidden_dim", "decoder width"),
    ("decoder.ffn_dim", "feed-forward inner width"),
    ("decoder.max_len", "token budget including [CLS] and [SEP]"),
    ("decoder.z_dim", "latent dimension"),
    ("decoder.dropout", "dropout rate during training"),
    ("vae.epochs", "passes over the generator corpus"),
    ("vae.corpus_cap", "maximum corpus sequences used"),
    ("vae.kl_weight", "final KL weight beta"),
    ("vae.warmup_fraction", "fraction of steps over which beta ramps from 0"),
    ("vae.lr", "Adam learning rate"),
    ("vae.batch_size", "sequences per step"),
    ("generation.sigma_grid", "latent noise scales, comma separated"),
    ("generation.num_samples", "sequences per seed and noise scale"),
    ("generation.sampling", "greedy or temperature"),
    ("generation.temperature", "softmax temperature when sampling"),
    ("generation.max_len", "token budget for generated sequences"),
    ("generation.seed_finetune_epochs", "generator epochs on the seed sequences before decoding"),
    ("synthetic.min_len", "shortest synthetic sequence"),
    ("synthetic.max_len", "longest synthetic sequence"),
    ("synthetic.families", "ancestor families in a synthetic corpus"),
    ("synthetic.mutation_rate", "per-residue substitution rate within a family"),
];

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let mask = MaskingPolicy::default();
        let pre = PretrainConfig::default();
        let ft = FinetuneConfig::default();
        let dec = DecoderConfig::default();
        let vae = VaeTrainConfig::default();
        let generation = GenerationConfig::default();
        Self {
            seed: 0,
            encoder: EncoderSection {
                num_layers: enc.num_layers,
                num_heads: enc.num_heads,
                hidden_dim: enc.hidden_dim,
                ffn_dim: enc.ffn_dim,
                max_len: enc.max_len,
                dropout: enc.dropout_rate,
            },
            masking: MaskingSection {
                select_rate: mask.select_rate,
                mask_rate: mask.mask_rate,
                random_rate: mask.random_rate,
                keep_rate: mask.keep_rate,
            },
            pretrain: PretrainSection {
                steps: pre.steps,
                batch_size: pre.batch_size,
                lr: pre.optimizer.lr,
                beta1: pre.optimizer.beta1,
                beta2: pre.optimizer.beta2,
                eps: pre.optimizer.eps,
                eval_mask_draws: pre.eval_mask_draws,
                heldout_fraction: 0.1,
            },
            finetune: FinetuneSection {
                epochs: ft.epochs,
                batch_size: ft.batch_size,
                encoder_lr: ft.encoder_lr,
                head_lr: ft.head_lr,
                freeze_encoder: ft.freeze_encoder,
            },
            decoder: DecoderSection {
                num_layers: dec.num_layers,
                num_heads: dec.num_heads,
                hidden_dim: dec.hidden_dim,
                ffn_dim: dec.ffn_dim,
                max_len: dec.max_len,
                z_dim: dec.z_dim,
                dropout: dec.dropout_rate,
            },
            vae: VaeSection {
                epochs: vae.epochs,
                corpus_cap: vae.corpus_cap,
                kl_weight: vae.kl_weight,
                warmup_fraction: vae.warmup_fraction,
                lr: vae.lr,
                batch_size: vae.batch_size,
            },
            generation: GenerationSection {
                sigma_grid: generation.sigma_grid,
                num_samples: generation.num_samples,
                sampling: "temperature".into(),
                temperature: 1.0,
                max_len: generation.max_len,
                seed_finetune_epochs: 0,
            },
            synthetic: SyntheticSection {
                min_len: 20,
                max_len: 40,
                families: 4,
                mutation_rate: 0.05,
            },
        }
    }
}

// Stream ids for derived seeds; fixed so configs stay reproducible.
const STREAM_ENCODER: u64 = 1;
const STREAM_MASKING: u64 = 2;
const STREAM_PRETRAIN: u64 = 3;
const STREAM_HEAD: u64 = 4;
const STREAM_FINETUNE: u64 = 5;
const STREAM_DECODER: u64 = 6;
const STREAM_VAE_HEAD: u64 = 7;
const STREAM_VAE: u64 = 8;
const STREAM_GENERATION: u64 = 9;
const STREAM_DATA: u64 = 10;

impl RunConfig {
    fn derived(&self, stream: u64) -> u64 {
        Rng::derive(self.seed, stream).next_u64()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            num_layers: e.num_layers,
            num_heads: e.num_heads,
            hidden_dim: e.hidden_dim,
            ffn_dim: e.ffn_dim,
            max_len: e.max_len,
            vocab_size: VOCAB_SIZE,
            dropout_rate: e.dropout,
            seed: self.derived(STREAM_ENCODER),
        }
    }

    pub fn masking_policy(&self) -> MaskingPolicy {
        let m = &self.masking;
        MaskingPolicy {
            select_rate: m.select_rate,
            mask_rate: m.mask_rate,
            random_rate: m.random_rate,
            keep_rate: m.keep_rate,
            seed: self.derived(STREAM_MASKING),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            steps: p.steps,
            batch_size: p.batch_size,
            optimizer: AdamHyper {
                lr: p.lr,
                beta1: p.beta1,
                beta2: p.beta2,
                eps: p.eps,
            },
            masking: self.masking_policy(),
            eval_mask_draws: p.eval_mask_draws,
            seed: self.derived(STREAM_PRETRAIN),
        }
    }

    pub fn head_seed(&self) -> u64 {
        self.derived(STREAM_HEAD)
    }

    /// Seed for data splits and synthetic generation.
    pub fn data_seed(&self) -> u64 {
        self.derived(STREAM_DATA)
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            epochs: f.epochs,
            batch_size: f.batch_size,
            encoder_lr: f.encoder_lr,
            head_lr: f.head_lr,
            freeze_encoder: f.freeze_encoder,
            seed: self.derived(STREAM_FINETUNE),
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        let d = &self.decoder;
        DecoderConfig {
            num_layers: d.num_layers,
            num_heads: d.num_heads,
            hidden_dim: d.hidden_dim,
            ffn_dim: d.ffn_dim,
            max_len: d.max_len,
            z_dim: d.z_dim,
            dropout_rate: d.dropout,
            seed: self.derived(STREAM_DECODER),
        }
    }

    pub fn vae_head_config(&self, input_dim: usize) -> VaeHeadConfig {
        VaeHeadConfig {
            input_dim,
            z_dim: self.decoder.z_dim,
            seed: self.derived(STREAM_VAE_HEAD),
        }
    }

    pub fn vae_train_config(&self) -> VaeTrainConfig {
        let v = &self.vae;
        VaeTrainConfig {
            epochs: v.epochs,
            corpus_cap: v.corpus_cap,
            kl_weight: v.kl_weight,
            warmup_fraction: v.warmup_fraction,
            lr: v.lr,
            batch_size: v.batch_size,
            seed: self.derived(STREAM_VAE),
        }
    }

    pub fn sampling(&self) -> Result<Sampling> {
        let s = match self.generation.sampling.as_str() {
            "greedy" => Sampling::Greedy,
            "temperature" => Sampling::Temperature {
                tau: self.generation.temperature,
            },
            other => {
                return Err(Error::config(format!(
                    "generation.sampling must be greedy or temperature, got {other:?}"
                )))
            }
        };
        s.validate()?;
        Ok(s)
    }

    pub fn generation_config(&self) -> Result<GenerationConfig> {
        let g = &self.generation;
        Ok(GenerationConfig {
            sigma_grid: g.sigma_grid.clone(),
            num_samples: g.num_samples,
            sampling: self.sampling()?,
            max_len: g.max_len,
            seed: self.derived(STREAM_GENERATION),
        })
    }

    /// Validate every derived component config.
    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.masking_policy().validate()?;
        self.decoder_config().validate()?;
        self.vae_train_config().validate()?;
        self.generation_config()?.validate()?;
        if !(0.0..1.0).contains(&self.pretrain.heldout_fraction) {
            return Err(Error::config("pretrain.heldout_fraction must lie in [0, 1)"));
        }
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        let s = &self.synthetic;
        if s.min_len == 0 || s.min_len > s.max_len || s.families == 0 || !(0.0..=1.0).contains(&s.mutation_rate) {
            return Err(Error::config("synthetic section is inconsistent"));
        }
        Ok(())
    }

    /// Parse a config document over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let at_line = |m: String| Error::config(format!("line {}: {m}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at_line(format!("expected `key = value`, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(m) => at_line(m),
                other => at_line(other.to_string()),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Override one key. The value is typed by the key's current value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let slot = key
            .split('.')
            .try_fold(&mut tree, |node, part| node.get_mut(part))
            .filter(|v| !v.is_object())
            .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
        *slot = typed_value(slot, value).map_err(|m| Error::config(format!("{key}: {m}")))?;
        *self = serde_json::from_value(tree).map_err(|e| Error::config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override must be key=value, got {o:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// The full document, one commented key per line; `parse(to_text())` is
    /// the identity.
    pub fn to_text(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        let mut section = "";
        for (key, doc) in KEY_DOCS {
            let sec = key.split_once('.').map_or("", |(s, _)| s);
            if sec != section {
                out.push('\n');
                section = sec;
            }
            let v = key.split('.').fold(&tree, |n, p| &n[p]);
            out.push_str(&format!("# {doc}\n{key} = {}\n", render(v)));
        }
        out
    }
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn unquote(s: &str) -> &str {
    s.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(s)
}

fn parse_number(text: &str, like: &Number) -> std::result::Result<Value, String> {
    if like.is_f64() {
        let x: f64 = text.parse().map_err(|_| format!("expected a number, got {text:?}"))?;
        Number::from_f64(x)
            .map(Value::Number)
            .ok_or_else(|| format!("expected a finite number, got {text:?}"))
    } else {
        let n: u64 = text
            .parse()
            .map_err(|_| format!("expected a non-negative integer, got {text:?}"))?;
        Ok(Value::Number(n.into()))
    }
}

fn typed_value(current: &Value, text: &str) -> std::result::Result<Value, String> {
    match current {
        Value::Bool(_) => match text {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(format!("expected true or false, got {text:?}")),
        },
        Value::Number(n) => parse_number(text, n),
        Value::String(_) => Ok(Value::String(unquote(text).to_string())),
        Value::Array(_) => {
            let inner = text.strip_prefix('[').and_then(|t| t.strip_suffix(']')).unwrap_or(text);
            let like = Number::from_f64(0.0).expect("finite");
            inner
                .split(',')
                .map(|p| parse_number(p.trim(), &like))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        _ => Err("not a settable key".into()),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        Value::Number(n) if n.is_f64() => {
            // f32 fields widen to noisy f64 digits; print the f32 form when exact
            let x = n.as_f64().expect("f64");
            let narrow = x as f32;
            if f64::from(narrow) == x {
                format!("{narrow:?}")
            } else {
                format!("{x:?}")
            }
        }
        other => other.to_string(),
    }
}

/// Dotted keys of a JSON object tree, in serialization order.
pub fn flatten_keys(v: &Value) -> Vec<String> {
    fn walk(prefix: &str, v: &Map<String, Value>, out: &mut Vec<String>) {
        for (k, child) in v {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match child {
                Value::Object(m) => walk(&key, m, out),
                _ => out.push(key),
            }
        }
    }
    let mut out = Vec::new();
    if let Value::Object(m) = v {
        walk("", m, &mut out);
    }
    out
}
