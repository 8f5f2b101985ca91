use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::Serialize;

use protlm::checkpoint::{encoder_checkpoint, generator_checkpoint};
use protlm::data::{
    family_corpus, filter_by_length, load_task_csv_file, read_fasta_file, write_fasta, write_task_csv, SyntheticTask,
};
use protlm::generative::{seed_generation_campaign, train_vae, SeedGenerator, VaeTrainConfig};
use protlm::model::{finetune, pretrain, HeadConfig};
use protlm::{
    run_benchmark, Checkpoint, DecoderModel, EncoderModel, Error, Rng, RunConfig, TaskBundle, TaskHead, TaskKind,
    TaskSpec, VariationalHead,
};

use crate::args::{
    Command, EvaluateArgs, FinetuneArgs, GenerateArgs, MakeSyntheticArgs, PretrainArgs, TrainDecoderArgs,
};
use crate::manifest::{with_suffix, Artifact};
use crate::UsageError;

/// What a command read and wrote, plus a one-line summary for the terminal.
pub struct Outcome {
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub summary: String,
}

pub fn execute(cmd: &Command, cfg: &RunConfig) -> Result<Outcome> {
    match cmd {
        Command::MakeSynthetic(a) => make_synthetic(a, cfg),
        Command::Pretrain(a) => run_pretrain(a, cfg),
        Command::Finetune(a) => run_finetune(a, cfg),
        Command::Evaluate(a) => evaluate(a, cfg),
        Command::TrainDecoder(a) => train_decoder(a, cfg),
        Command::Generate(a) => generate(a, cfg),
        Command::Replay(_) => unreachable!("replay is dispatched before execute"),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| Error::from(e).in_file(path))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::from(e).in_file(path))?;
    Ok(())
}

fn run_snapshot(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn load_encoder(path: &Path) -> Result<(EncoderModel, Option<TaskBundle>)> {
    let ck = load_checkpoint(path)?;
    Ok(ck.into_encoder().map_err(|e| e.in_file(path))?)
}

fn load_generator(path: &Path) -> Result<(VariationalHead, DecoderModel)> {
    let ck = load_checkpoint(path)?;
    Ok(ck.into_generator().map_err(|e| e.in_file(path))?)
}

/// Corpus sequences that fit `max_len`; fails when none do.
fn corpus_sequences(path: &Path, max_len: usize) -> Result<(Vec<String>, usize)> {
    let records = read_fasta_file(path)?;
    let total = records.len();
    let kept: Vec<String> = filter_by_length(records, max_len).into_iter().map(|r| r.sequence).collect();
    if kept.is_empty() {
        return Err(Error::invalid(format!(
            "no sequences of {total} fit the {max_len}-token budget"
        ))
        .in_file(path)
        .into());
    }
    Ok((kept, total))
}

fn config_inputs(cmd_cfg: Option<&Path>) -> Result<Vec<Artifact>> {
    cmd_cfg.map(|p| Artifact::of("config", p)).into_iter().collect()
}

fn make_synthetic(a: &MakeSyntheticArgs, cfg: &RunConfig) -> Result<Outcome> {
    if a.n == 0 {
        bail!(UsageError("--n must be positive".into()));
    }
    let s = &cfg.synthetic;
    let summary = match a.task_kind.task_kind() {
        None => {
            let corpus = family_corpus(a.n, s.families, s.min_len, s.max_len, s.mutation_rate, cfg.data_seed())?;
            write_fasta(&corpus, create(&a.out)?, 60)?;
            format!("wrote {} corpus sequences to {}", corpus.len(), a.out.display())
        }
        Some(kind) => {
            let task = SyntheticTask {
                min_len: s.min_len,
                max_len: s.max_len,
                ..SyntheticTask::with_total(kind, a.n, cfg.data_seed())
            };
            let ds = task.generate()?;
            write_task_csv(&ds, create(&a.out)?)?;
            format!(
                "wrote {} {} records ({}/{}/{}) to {}",
                ds.len(),
                ds.spec.name,
                ds.splits.train.len(),
                ds.splits.valid.len(),
                ds.splits.test.len(),
                a.out.display()
            )
        }
    };
    Ok(Outcome {
        inputs: config_inputs(a.cfg.config.as_deref())?,
        outputs: vec![Artifact::of("data", &a.out)?],
        summary,
    })
}

fn run_pretrain(a: &PretrainArgs, cfg: &RunConfig) -> Result<Outcome> {
    let enc_cfg = cfg.encoder_config();
    let (mut seqs, total) = corpus_sequences(&a.corpus, enc_cfg.max_len)?;
    Rng::derive(cfg.data_seed(), 0).shuffle(&mut seqs);
    let n_heldout = (seqs.len() as f64 * cfg.pretrain.heldout_fraction).floor() as usize;
    let n_heldout = n_heldout.min(seqs.len() - 1);
    let heldout = seqs.split_off(seqs.len() - n_heldout);
    let mut model = EncoderModel::new(enc_cfg)?;
    let report = pretrain(&mut model, &seqs, &heldout, &cfg.pretrain_config())?;
    encoder_checkpoint(&model, None, run_snapshot(cfg))?.save(&a.out)?;
    let report_path = with_suffix(&a.out, "report.json");
    write_json(&report_path, &report)?;
    let acc = |k: &str| report.metrics.get(k).map_or("n/a".to_string(), |m| format!("{:.4}", m.value));
    let mut inputs = config_inputs(a.cfg.config.as_deref())?;
    inputs.push(Artifact::of("corpus", &a.corpus)?);
    Ok(Outcome {
        inputs,
        outputs: vec![Artifact::of("checkpoint", &a.out)?, Artifact::of("report", &report_path)?],
        summary: format!(
            "pretrained on {} of {total} sequences ({} held out) for {} steps: final loss {:.4}, masked accuracy train {} heldout {}",
            seqs.len(),
            heldout.len(),
            report.steps(),
            report.loss_trace.last().copied().unwrap_or(f64::NAN),
            acc("train_masked"),
            acc("heldout_masked"),
        ),
    })
}

fn task_spec(a: &FinetuneArgs) -> Result<TaskSpec> {
    let name = a
        .task_csv
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("task")
        .to_string();
    let classes = match a.task_kind {
        TaskKind::SequenceRegression => {
            if a.num_classes.is_some() {
                bail!(UsageError("--num-classes does not apply to regression".into()));
            }
            None
        }
        TaskKind::TokenClassification | TaskKind::SequenceClassification => Some(a.num_classes.unwrap_or(2)),
    };
    TaskSpec::new(name, a.task_kind, classes).map_err(|e| UsageError(e.to_string()).into())
}

fn run_finetune(a: &FinetuneArgs, cfg: &RunConfig) -> Result<Outcome> {
    let spec = task_spec(a)?;
    let (mut encoder, _) = load_encoder(&a.ckpt)?;
    let ds = load_task_csv_file(&a.task_csv, &spec, cfg.data_seed())?;
    let mut head = TaskHead::new(HeadConfig::for_task(&spec, encoder.hidden_dim(), cfg.head_seed()))?;
    let report = finetune(&mut encoder, &mut head, &ds, &cfg.finetune_config())?;
    let task = TaskBundle { spec, head };
    encoder_checkpoint(&encoder, Some(&task), run_snapshot(cfg))?.save(&a.out)?;
    let report_path = with_suffix(&a.out, "report.json");
    write_json(&report_path, &report)?;
    let mut inputs = config_inputs(a.cfg.config.as_deref())?;
    inputs.push(Artifact::of("checkpoint", &a.ckpt)?);
    inputs.push(Artifact::of("task_csv", &a.task_csv)?);
    let metrics: Vec<String> = report
        .metrics
        .iter()
        .map(|(split, m)| format!("{split} {} {:.4}", m.name, m.value))
        .collect();
    Ok(Outcome {
        inputs,
        outputs: vec![Artifact::of("checkpoint", &a.out)?, Artifact::of("report", &report_path)?],
        summary: format!(
            "fine-tuned {} for {} steps: {}",
            task.spec.name,
            report.steps(),
            metrics.join(", ")
        ),
    })
}

fn evaluate(a: &EvaluateArgs, cfg: &RunConfig) -> Result<Outcome> {
    let ck = load_checkpoint(&a.ckpt)?;
    let (encoder, task) = ck.into_encoder().map_err(|e| e.in_file(&a.ckpt))?;
    let Some(task) = task else {
        bail!(UsageError(format!(
            "{} has no task head; run finetune first",
            a.ckpt.display()
        )));
    };
    let ds = load_task_csv_file(&a.task_csv, &task.spec, cfg.data_seed())?;
    let config = serde_json::json!({ "run": cfg, "checkpoint_run": ck.run });
    let report = run_benchmark(&encoder, &task.head, &ds, cfg.finetune.batch_size, config, cfg.seed)?;
    write_json(&a.report, &report)?;
    let csv_path = a.report.with_extension("csv");
    report.write_csv(create(&csv_path)?)?;
    let mut inputs = config_inputs(a.cfg.config.as_deref())?;
    inputs.push(Artifact::of("checkpoint", &a.ckpt)?);
    inputs.push(Artifact::of("task_csv", &a.task_csv)?);
    let m = &report.metrics[0];
    Ok(Outcome {
        inputs,
        outputs: vec![Artifact::of("report", &a.report)?, Artifact::of("report_csv", &csv_path)?],
        summary: format!("{} test {} = {:.4} over {} items", report.task, m.name, m.value, m.support),
    })
}

fn train_decoder(a: &TrainDecoderArgs, cfg: &RunConfig) -> Result<Outcome> {
    let (encoder, _) = load_encoder(&a.ckpt)?;
    let dec_cfg = cfg.decoder_config();
    let budget = dec_cfg.max_len.min(encoder.config.max_len);
    let (seqs, total) = corpus_sequences(&a.corpus, budget)?;
    let mut vae = VariationalHead::new(cfg.vae_head_config(encoder.hidden_dim()))?;
    let mut decoder = DecoderModel::new(dec_cfg)?;
    let report = train_vae(&encoder, &mut vae, &mut decoder, &seqs, &cfg.vae_train_config())?;
    generator_checkpoint(&vae, &decoder, run_snapshot(cfg))?.save(&a.out)?;
    let report_path = with_suffix(&a.out, "report.json");
    write_json(&report_path, &report)?;
    let mut inputs = config_inputs(a.cfg.config.as_deref())?;
    inputs.push(Artifact::of("checkpoint", &a.ckpt)?);
    inputs.push(Artifact::of("corpus", &a.corpus)?);
    let last = |k: &str| report.components[k].last().copied().unwrap_or(f64::NAN);
    Ok(Outcome {
        inputs,
        outputs: vec![Artifact::of("checkpoint", &a.out)?, Artifact::of("report", &report_path)?],
        summary: format!(
            "trained generator on {} of {total} sequences for {} steps: reconstruction {:.4}, kl {:.4}",
            seqs.len().min(cfg.vae.corpus_cap),
            report.steps(),
            last("reconstruction"),
            last("kl"),
        ),
    })
}

pub fn generate_paths(prefix: &Path) -> [PathBuf; 3] {
    [
        with_suffix(prefix, "fasta"),
        with_suffix(prefix, "csv"),
        with_suffix(prefix, "json"),
    ]
}

fn generate(a: &GenerateArgs, cfg: &RunConfig) -> Result<Outcome> {
    let (encoder, _) = load_encoder(&a.ckpt)?;
    let (mut vae, mut decoder) = load_generator(&a.decoder_ckpt)?;
    if vae.config.input_dim != encoder.hidden_dim() {
        return Err(Error::shape(format!(
            "generator expects {}-dim embeddings, encoder produces {}",
            vae.config.input_dim,
            encoder.hidden_dim()
        ))
        .in_file(&a.decoder_ckpt)
        .into());
    }
    let seeds = read_fasta_file(&a.seed_fasta)?;
    if seeds.is_empty() {
        return Err(Error::invalid("no seed sequences").in_file(&a.seed_fasta).into());
    }
    let epochs = cfg.generation.seed_finetune_epochs;
    if epochs > 0 {
        let seqs: Vec<String> = seeds.iter().map(|r| r.sequence.clone()).collect();
        let vcfg = VaeTrainConfig {
            epochs,
            ..cfg.vae_train_config()
        };
        train_vae(&encoder, &mut vae, &mut decoder, &seqs, &vcfg)?;
    }
    let gen_cfg = cfg.generation_config()?;
    let generator = SeedGenerator { encoder, vae, decoder };
    let report = seed_generation_campaign(&generator, &seeds, &gen_cfg)?;
    let [fasta, csv, json] = generate_paths(&a.out_prefix);
    report.write_fasta(create(&fasta)?)?;
    report.write_csv(create(&csv)?)?;
    write_json(&json, &report)?;
    let mut inputs = config_inputs(a.cfg.config.as_deref())?;
    inputs.push(Artifact::of("checkpoint", &a.ckpt)?);
    inputs.push(Artifact::of("decoder_checkpoint", &a.decoder_ckpt)?);
    inputs.push(Artifact::of("seed_fasta", &a.seed_fasta)?);
    let trend: Vec<String> = report
        .summary
        .iter()
        .map(|s| format!("sigma {} identity {:.3}±{:.3}", s.sigma, s.mean_identity, s.std_error))
        .collect();
    Ok(Outcome {
        inputs,
        outputs: vec![
            Artifact::of("fasta", &fasta)?,
            Artifact::of("csv", &csv)?,
            Artifact::of("report", &json)?,
        ],
        summary: format!("generated {} sequences: {}", report.rows.len(), trend.join("; ")),
    })
}
