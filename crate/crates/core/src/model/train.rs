use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::encoder::{pool, EncoderModel};
use super::head::TaskHead;
use super::nn::Dropout;
use crate::data::{batch_iter, Batch, Dataset, Label, SplitName, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auc_roc, spearman_rho, Metric, MetricResult};
use crate::rng::Rng;
use crate::tensor::{Adam, AdamHyper, Tape, Var};
use crate::tokenizer::{apply_mlm_mask_with, MaskingPolicy, IGNORE_INDEX};

/// Outcome of a training run. `loss_trace` has one entry per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunReport {
    pub run: String,
    pub seed: u64,
    pub loss_trace: Vec<f64>,
    /// Named per-step loss terms whose weighted sum is `loss_trace`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub components: BTreeMap<String, Vec<f64>>,
    /// Keyed by evaluation slice, e.g. `test` or `train_masked`.
    pub metrics: BTreeMap<String, MetricResult>,
    pub config: serde_json::Value,
    /// Not serialized, so that written reports are reproducible.
    #[serde(skip)]
    pub wall_clock: Duration,
}

impl TrainRunReport {
    pub fn steps(&self) -> usize {
        self.loss_trace.len()
    }

    /// Mean of the first and last `n` losses.
    pub fn head_tail_means(&self, n: usize) -> Option<(f64, f64)> {
        let t = &self.loss_trace;
        if n == 0 || t.len() < n {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&t[..n]), mean(&t[t.len() - n..])))
    }
}

pub(crate) fn check_loss(value: f32, step: usize) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value} at step {step}")));
    }
    Ok(value as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamHyper,
    pub masking: MaskingPolicy,
    /// Independent masking draws averaged when scoring masked accuracy.
    pub eval_mask_draws: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            optimizer: AdamHyper::default(),
            masking: MaskingPolicy::default(),
            eval_mask_draws: 4,
            seed: 0,
        }
    }
}

/// Masked-LM training on `train`; masked-token accuracy is reported for
/// `train` and, when non-empty, `heldout`.
///
/// Masks come from a stream seeded by `masking.seed`; batch order and dropout
/// from streams derived from `seed`.
pub fn pretrain(
    model: &mut EncoderModel,
    train: &[String],
    heldout: &[String],
    cfg: &PretrainConfig,
) -> Result<TrainRunReport> {
    pretrain_with_hook(model, train, heldout, cfg, &mut |_, _| Ok(()))
}

/// As [`pretrain`], calling `on_step(step, model)` after every update.
pub fn pretrain_with_hook(
    model: &mut EncoderModel,
    train: &[String],
    heldout: &[String],
    cfg: &PretrainConfig,
    on_step: &mut dyn FnMut(usize, &EncoderModel) -> Result<()>,
) -> Result<TrainRunReport> {
    let started = Instant::now();
    if train.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    cfg.masking.validate()?;
    let max_len = model.config.max_len;
    model.set_body_trainable(true);
    model.set_mlm_trainable(true);
    let mut adam = Adam::new(&model.params, cfg.optimizer);
    let mut mask_rng = Rng::new(cfg.masking.seed);
    let mut order_rng = Rng::derive(cfg.seed, 1);
    let mut dropout_rng = Rng::derive(cfg.seed, 2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut loss_trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let (tokens, _) = Batch::from_sequences(picked.iter().map(|&i| train[i].as_str()), max_len)?;
        let mut inputs = Vec::with_capacity(tokens.len());
        let mut targets = Vec::new();
        for t in &tokens {
            let m = apply_mlm_mask_with(t, &cfg.masking, &mut mask_rng);
            inputs.push(crate::tokenizer::TokenSequence {
                ids: m.ids,
                attention_mask: t.attention_mask.clone(),
                true_length: t.true_length,
            });
            targets.extend(m.labels);
        }
        let mut tape = Tape::new();
        let mut dropout = Dropout::train(model.config.dropout_rate, &mut dropout_rng);
        let loss = mlm_loss(model, &mut tape, &inputs, &targets, &mut dropout)?;
        loss_trace.push(check_loss(tape.scalar(loss), step)?);
        model.params.zero_grad();
        tape.backward_into(loss, &mut [&mut model.params])?;
        adam.step(&mut model.params)?;
        on_step(step, model)?;
    }
    model.params.zero_grad();

    let mut metrics = BTreeMap::new();
    metrics.insert(
        "train_masked".to_string(),
        masked_accuracy(model, train, &cfg.masking, cfg.eval_mask_draws, cfg.batch_size)?,
    );
    if !heldout.is_empty() {
        metrics.insert(
            "heldout_masked".to_string(),
            masked_accuracy(model, heldout, &cfg.masking, cfg.eval_mask_draws, cfg.batch_size)?,
        );
    }
    Ok(TrainRunReport {
        run: "pretrain".into(),
        seed: cfg.seed,
        loss_trace,
        components: BTreeMap::new(),
        metrics,
        config: serde_json::json!({ "encoder": model.config, "pretrain": cfg }),
        wall_clock: started.elapsed(),
    })
}

fn mlm_loss(
    model: &EncoderModel,
    tape: &mut Tape,
    inputs: &[crate::tokenizer::TokenSequence],
    targets: &[i64],
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let hidden = model.encode_batch(tape, inputs, dropout)?;
    let logits = model.mlm_logits(tape, hidden)?;
    let logits = tape.reshape(logits, &[targets.len(), model.config.vocab_size])?;
    tape.cross_entropy(logits, targets, IGNORE_INDEX)
}

/// Full masked-LM loss in evaluation mode, for gradient checks.
pub fn mlm_loss_eval(
    model: &EncoderModel,
    tape: &mut Tape,
    inputs: &[crate::tokenizer::TokenSequence],
    targets: &[i64],
) -> Result<Var> {
    mlm_loss(model, tape, inputs, targets, &mut Dropout::eval())
}

/// Fraction of selected positions whose argmax prediction recovers the
/// original token, over `draws` independent masking draws.
pub fn masked_accuracy(
    model: &EncoderModel,
    corpus: &[String],
    policy: &MaskingPolicy,
    draws: usize,
    batch_size: usize,
) -> Result<MetricResult> {
    let v = model.config.vocab_size;
    let mut hits = 0usize;
    let mut total = 0usize;
    for draw in 0..draws.max(1) {
        let mut rng = Rng::derive(policy.seed, 1_000 + draw as u64);
        for chunk in corpus.chunks(batch_size.max(1)) {
            let (tokens, _) = Batch::from_sequences(chunk.iter().map(String::as_str), model.config.max_len)?;
            let mut inputs = Vec::with_capacity(tokens.len());
            let mut targets = Vec::new();
            for t in &tokens {
                let m = apply_mlm_mask_with(t, policy, &mut rng);
                inputs.push(crate::tokenizer::TokenSequence {
                    ids: m.ids,
                    attention_mask: t.attention_mask.clone(),
                    true_length: t.true_length,
                });
                targets.extend(m.labels);
            }
            let mut tape = Tape::new();
            let hidden = model.encode_batch(&mut tape, &inputs, &mut Dropout::eval())?;
            let logits = model.mlm_logits(&mut tape, hidden)?;
            for (row, &t) in tape.value(logits).chunks(v).zip(&targets) {
                if t == IGNORE_INDEX {
                    continue;
                }
                total += 1;
                hits += usize::from(argmax(row) == t as usize);
            }
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("no positions were selected for masking".into()));
    }
    Ok(MetricResult {
        name: "masked_accuracy".into(),
        value: hits as f64 / total as f64,
        support: total,
    })
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub encoder_lr: f32,
    pub head_lr: f32,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            encoder_lr: 1e-4,
            head_lr: 1e-3,
            freeze_encoder: false,
            seed: 0,
        }
    }
}

/// Cross-entropy (classification kinds) or mean squared error (regression)
/// on the train split, then the task metric on the valid and test splits.
/// The MLM head is never updated.
pub fn finetune(
    model: &mut EncoderModel,
    head: &mut TaskHead,
    dataset: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<TrainRunReport> {
    let started = Instant::now();
    if head.config.kind != dataset.spec.kind {
        return Err(Error::invalid(format!(
            "head is for {} but the dataset is {}",
            head.config.kind, dataset.spec.kind
        )));
    }
    if head.config.outputs != dataset.spec.outputs() || head.config.input_dim != model.hidden_dim() {
        return Err(Error::shape("head dimensions do not match the model and task"));
    }
    if dataset.splits.train.is_empty() {
        return Err(Error::invalid("train split is empty"));
    }
    model.set_body_trainable(!cfg.freeze_encoder);
    model.set_mlm_trainable(false);
    let mut enc_adam = Adam::new(&model.params, AdamHyper::with_lr(cfg.encoder_lr));
    let mut head_adam = Adam::new(&head.params, AdamHyper::with_lr(cfg.head_lr));
    let mut dropout_rng = Rng::derive(cfg.seed, 2);
    let mut loss_trace = Vec::new();

    let result = (|| -> Result<()> {
        for epoch in 0..cfg.epochs {
            let shuffle = Rng::derive(cfg.seed, 100 + epoch as u64).next_u64();
            for batch in batch_iter(dataset, SplitName::Train, cfg.batch_size, model.config.max_len, Some(shuffle))? {
                let batch = batch?;
                let mut tape = Tape::new();
                let mut dropout = Dropout::train(model.config.dropout_rate, &mut dropout_rng);
                let out = forward_task(model, head, &mut tape, &batch, &mut dropout)?;
                let loss = task_loss(&mut tape, out, &batch, head.config.kind)?;
                loss_trace.push(check_loss(tape.scalar(loss), loss_trace.len())?);
                model.params.zero_grad();
                head.params.zero_grad();
                tape.backward_into(loss, &mut [&mut model.params, &mut head.params])?;
                if !cfg.freeze_encoder {
                    enc_adam.step(&mut model.params)?;
                }
                head_adam.step(&mut head.params)?;
            }
        }
        Ok(())
    })();
    model.params.zero_grad();
    head.params.zero_grad();
    model.set_body_trainable(true);
    model.set_mlm_trainable(true);
    result?;

    let mut metrics = BTreeMap::new();
    for split in [SplitName::Valid, SplitName::Test] {
        if !dataset.splits.get(split).is_empty() {
            let p = predict(model, head, dataset, split, cfg.batch_size)?;
            metrics.insert(split.as_str().to_string(), p.score(dataset.spec.metric)?);
        }
    }
    Ok(TrainRunReport {
        run: "finetune".into(),
        seed: cfg.seed,
        loss_trace,
        components: BTreeMap::new(),
        metrics,
        config: serde_json::json!({
            "encoder": model.config,
            "head": head.config,
            "finetune": cfg,
            "task": dataset.spec,
        }),
        wall_clock: started.elapsed(),
    })
}

fn forward_task(
    model: &EncoderModel,
    head: &TaskHead,
    tape: &mut Tape,
    batch: &Batch,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let hidden = model.encode_batch(tape, &batch.tokens, dropout)?;
    match head.config.kind {
        TaskKind::TokenClassification => head.forward(tape, hidden),
        _ => {
            let pooled = pool(tape, hidden, &batch.tokens)?;
            head.forward(tape, pooled)
        }
    }
}

/// Per-token targets: residue `i` sits at position `i + 1`; specials and
/// padding are ignored.
fn token_targets(batch: &Batch) -> Result<Vec<i64>> {
    let mut targets = vec![IGNORE_INDEX; batch.len() * batch.seq_len];
    for (b, label) in batch.labels.iter().enumerate() {
        let Label::Tokens(flags) = label else {
            return Err(Error::invalid("token task record without token labels"));
        };
        for (i, &f) in flags.iter().enumerate() {
            targets[b * batch.seq_len + i + 1] = f as i64;
        }
    }
    Ok(targets)
}

fn task_loss(tape: &mut Tape, out: Var, batch: &Batch, kind: TaskKind) -> Result<Var> {
    match kind {
        TaskKind::SequenceClassification => {
            let targets = batch
                .labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => Ok(*c as i64),
                    _ => Err(Error::invalid("classification record without a class label")),
                })
                .collect::<Result<Vec<_>>>()?;
            tape.cross_entropy(out, &targets, IGNORE_INDEX)
        }
        TaskKind::TokenClassification => {
            let targets = token_targets(batch)?;
            let c = *tape.shape(out).last().expect("rank 3");
            let flat = tape.reshape(out, &[targets.len(), c])?;
            tape.cross_entropy(flat, &targets, IGNORE_INDEX)
        }
        TaskKind::SequenceRegression => {
            let targets = batch
                .labels
                .iter()
                .map(|l| match l {
                    Label::Value(v) => Ok(*v as f32),
                    _ => Err(Error::invalid("regression record without a value label")),
                })
                .collect::<Result<Vec<_>>>()?;
            tape.mse(out, &targets)
        }
    }
}

/// Model outputs on one split, paired with the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Classes { predicted: Vec<usize>, truth: Vec<usize> },
    /// One score per residue: logit margin of class 1 over class 0.
    TokenScores { scores: Vec<f64>, labels: Vec<bool> },
    Values { predicted: Vec<f64>, truth: Vec<f64> },
}

impl Predictions {
    pub fn support(&self) -> usize {
        match self {
            Predictions::Classes { truth, .. } => truth.len(),
            Predictions::TokenScores { labels, .. } => labels.len(),
            Predictions::Values { truth, .. } => truth.len(),
        }
    }

    pub fn score(&self, metric: Metric) -> Result<MetricResult> {
        let value = match (self, metric) {
            (Predictions::Classes { predicted, truth }, Metric::Accuracy) => accuracy(predicted, truth)?,
            (Predictions::TokenScores { scores, labels }, Metric::AucRoc) => auc_roc(scores, labels)?,
            (Predictions::Values { predicted, truth }, Metric::Spearman) => spearman_rho(predicted, truth)?,
            _ => {
                return Err(Error::invalid(format!(
                    "metric {} does not apply to these predictions",
                    metric.name()
                )))
            }
        };
        Ok(MetricResult::new(metric, value, self.support()))
    }
}

/// Evaluation-mode predictions in split order.
pub fn predict(
    model: &EncoderModel,
    head: &TaskHead,
    dataset: &Dataset,
    split: SplitName,
    batch_size: usize,
) -> Result<Predictions> {
    let kind = head.config.kind;
    let mut preds = match kind {
        TaskKind::SequenceClassification => Predictions::Classes {
            predicted: vec![],
            truth: vec![],
        },
        TaskKind::TokenClassification => Predictions::TokenScores {
            scores: vec![],
            labels: vec![],
        },
        TaskKind::SequenceRegression => Predictions::Values {
            predicted: vec![],
            truth: vec![],
        },
    };
    for batch in batch_iter(dataset, split, batch_size.max(1), model.config.max_len, None)? {
        let batch = batch?;
        let mut tape = Tape::new();
        let out = forward_task(model, head, &mut tape, &batch, &mut Dropout::eval())?;
        let values = tape.value(out);
        match &mut preds {
            Predictions::Classes { predicted, truth } => {
                let c = head.config.outputs;
                for (row, label) in values.chunks(c).zip(&batch.labels) {
                    let Label::Class(t) = label else {
                        return Err(Error::invalid("classification record without a class label"));
                    };
                    predicted.push(argmax(row));
                    truth.push(*t);
                }
            }
            Predictions::TokenScores { scores, labels } => {
                let c = head.config.outputs;
                let l = batch.seq_len;
                for (b, label) in batch.labels.iter().enumerate() {
                    let Label::Tokens(flags) = label else {
                        return Err(Error::invalid("token task record without token labels"));
                    };
                    for (i, &f) in flags.iter().enumerate() {
                        let row = &values[(b * l + i + 1) * c..(b * l + i + 2) * c];
                        scores.push(row[1] as f64 - row[0] as f64);
                        labels.push(f == 1);
                    }
                }
            }
            Predictions::Values { predicted, truth } => {
                for (v, label) in values.iter().zip(&batch.labels) {
                    let Label::Value(t) = label else {
                        return Err(Error::invalid("regression record without a value label"));
                    };
                    predicted.push(*v as f64);
                    truth.push(*t);
                }
            }
        }
    }
    Ok(preds)
}
