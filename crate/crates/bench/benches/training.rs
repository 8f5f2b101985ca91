use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use protlm::checkpoint::encoder_checkpoint;
use protlm::model::{pretrain, PretrainConfig};
use protlm::Checkpoint;
use protlm_bench::{corpus, encoder, token_batch};

fn encoder_forward(c: &mut Criterion) {
    let model = encoder(66);
    let batch = token_batch(&corpus(16, 40, 64), 66);
    c.bench_function("encoder_eval_16x66", |b| b.iter(|| black_box(model.encode_eval(&batch).unwrap())));
}

fn mlm_steps(c: &mut Criterion) {
    let seqs = corpus(32, 40, 64);
    let cfg = PretrainConfig {
        steps: 5,
        batch_size: 16,
        eval_mask_draws: 1,
        ..Default::default()
    };
    let mut group = c.benchmark_group("pretrain");
    group.sample_size(10);
    group.bench_function("5_steps_batch16", |b| {
        b.iter(|| {
            let mut model = encoder(66);
            black_box(pretrain(&mut model, &seqs, &[], &cfg).unwrap())
        })
    });
    group.finish();
}

fn checkpoint_io(c: &mut Criterion) {
    let ck = encoder_checkpoint(&encoder(128), None, serde_json::Value::Null).unwrap();
    let bytes = ck.to_bytes().unwrap();
    c.bench_function("checkpoint_serialize", |b| b.iter(|| black_box(ck.to_bytes().unwrap())));
    c.bench_function("checkpoint_parse", |b| b.iter(|| black_box(Checkpoint::from_bytes(&bytes).unwrap())));
}

criterion_group!(benches, encoder_forward, mlm_steps, checkpoint_io);
criterion_main!(benches);
