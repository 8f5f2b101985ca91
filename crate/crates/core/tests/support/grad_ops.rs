//! Gradient-check cases shared by the core test suite and the acceptance run.
//!
//! Every op is re-implemented here in f64, independently of the engine. The
//! finite differences (h = 1e-3) are taken on that f64 reference; each case
//! returns the worst relative L2 error of the engine's f32 gradient.

use protlm::data::Batch;
use protlm::model::{mlm_loss_eval, EncoderConfig, EncoderModel};
use protlm::rng::Rng;
use protlm::tensor::{AttentionMask, Tape, Tensor, Var};
use protlm::tokenizer::{apply_mlm_mask_with, MaskingPolicy, TokenSequence, IGNORE_INDEX, STANDARD_RESIDUES};

const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const INSTANCES: u64 = 20;

type Oracle = dyn Fn(&[Vec<f64>]) -> Vec<f64>;

fn rand_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f32> {
    (0..n).map(|_| (rng.normal() * scale) as f32).collect()
}

fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap().with_grad()
}

/// Returns the worst relative error over all inputs.
fn check(
    seed: u64,
    inputs: &[Tensor],
    engine: impl Fn(&mut Tape, &[Var]) -> Var,
    oracle: &Oracle,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = engine(&mut tape, &vars);
    let n_out = tape.value(out).len();
    let mut rng = Rng::derive(seed, 99);
    let weights: Vec<f32> = (0..n_out).map(|_| rng.normal() as f32).collect();
    let weighted = tape.mul_const(out, weights.clone()).unwrap();
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let loss64 = |xs: &[Vec<f64>]| -> f64 {
        let y = oracle(xs);
        assert_eq!(y.len(), n_out, "oracle output length");
        y.iter().zip(&weights).map(|(a, &w)| a * w as f64).sum()
    };

    let mut worst: f64 = 0.0;
    for (ii, var) in vars.iter().enumerate() {
        if !inputs[ii].requires_grad {
            continue;
        }
        let analytic = grads.wrt(*var).expect("gradient for input");
        let mut num = 0.0;
        let mut diff = 0.0;
        for j in 0..base[ii].len() {
            let mut xs = base.clone();
            xs[ii][j] += H;
            let up = loss64(&xs);
            xs[ii][j] -= 2.0 * H;
            let down = loss64(&xs);
            let fd = (up - down) / (2.0 * H);
            num += fd * fd;
            diff += (fd - analytic[j] as f64).powi(2);
        }
        let rel = diff.sqrt() / num.sqrt().max(1e-12);
        worst = worst.max(rel);
    }
    worst
}

fn gemm64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

fn dims(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

pub fn matmul(seed: u64) -> f64 {
    let mut r = Rng::new(seed);
    let (b, m, k, n) = (dims(&mut r, 1, 2), dims(&mut r, 1, 4), dims(&mut r, 1, 5), dims(&mut r, 1, 4));
    let a = tensor(&[b, m, k], rand_vec(&mut r, b * m * k, 1.0));
    let w = tensor(&[k, n], rand_vec(&mut r, k * n, 1.0));
    check(
        seed,
        &[a, w],
        |t, v| t.matmul(v[0], v[1]).unwrap(),
        &move |x| gemm64(&x[0], &x[1], b * m, k, n),
    )
}

pub fn batch_matmul(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for trans_b in [false, true] {
        let mut r = Rng::new(seed + 100 + 50 * trans_b as u64);
        let (nb, m, k, n) = (dims(&mut r, 1, 3), dims(&mut r, 1, 4), dims(&mut r, 1, 4), dims(&mut r, 1, 4));
        let a = tensor(&[nb, m, k], rand_vec(&mut r, nb * m * k, 1.0));
        let bshape = if trans_b { [nb, n, k] } else { [nb, k, n] };
        let b = tensor(&bshape, rand_vec(&mut r, nb * k * n, 1.0));
        let e = check(
            seed,
            &[a, b],
            |t, v| t.batch_matmul(v[0], v[1], trans_b).unwrap(),
            &move |x| {
                let mut out = Vec::new();
                for i in 0..nb {
                    let ab = &x[0][i * m * k..(i + 1) * m * k];
                    let bb = &x[1][i * k * n..(i + 1) * k * n];
                    let bb: Vec<f64> = if trans_b {
                        let mut t = vec![0.0; k * n];
                        for p in 0..k {
                            for j in 0..n {
                                t[p * n + j] = bb[j * k + p];
                            }
                        }
                        t
                    } else {
                        bb.to_vec()
                    };
                    out.extend(gemm64(ab, &bb, m, k, n));
                }
                out
            },
        );
        worst = worst.max(e);
    }
    worst
}

pub fn elementwise_binary(seed: u64) -> f64 {
    let mut r = Rng::new(seed + 200);
    let n = dims(&mut r, 1, 8);
    let a = tensor(&[n], rand_vec(&mut r, n, 1.0));
    let b = tensor(&[n], rand_vec(&mut r, n, 1.0));
    let e1 = check(seed, &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap(), &|x| {
        x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()
    });
    let e2 = check(seed, &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap(), &|x| {
        x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect()
    });
    let e3 = check(seed, &[a, b], |t, v| t.mul(v[0], v[1]).unwrap(), &|x| {
        x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()
    });
    e1.max(e2).max(e3)
}

pub fn add_bias(seed: u64) -> f64 {
    let mut r = Rng::new(seed + 300);
    let (rows, n) = (dims(&mut r, 1, 5), dims(&mut r, 1, 5));
    let x = tensor(&[rows, n], rand_vec(&mut r, rows * n, 1.0));
    let b = tensor(&[n], rand_vec(&mut r, n, 1.0));
    check(seed, &[x, b], |t, v| t.add_bias(v[0], v[1]).unwrap(), &move |x| {
        (0..rows * n).map(|i| x[0][i] + x[1][i % n]).collect()
    })
}

pub fn unary(seed: u64) -> f64 {
    let mut r = Rng::new(seed + 400);
    let n = dims(&mut r, 1, 10);
    let x = tensor(&[n], rand_vec(&mut r, n, 1.5));
    let c: Vec<f32> = rand_vec(&mut r, n, 1.0);
    let c64: Vec<f64> = c.iter().map(|&v| v as f64).collect();
    let e1 = check(seed, std::slice::from_ref(&x), |t, v| t.affine(v[0], -0.7, 0.3), &|x| {
        x[0].iter().map(|v| -0.7 * v + 0.3).collect()
    });
    let e2 = check(
        seed,
        std::slice::from_ref(&x),
        move |t, v| t.mul_const(v[0], c.clone()).unwrap(),
        &move |x| x[0].iter().zip(&c64).map(|(a, b)| a * b).collect(),
    );
    let e3 = check(seed, std::slice::from_ref(&x), |t, v| t.exp(v[0]), &|x| {
        x[0].iter().map(|v| v.exp()).collect()
    });
    let e4 = check(seed, &[x], |t, v| t.gelu(v[0]), &|x| {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        x[0].iter()
            .map(|&v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh()))
            .collect()
    });
    e1.max(e2).max(e3).max(e4)
}

pub fn clamp(seed: u64) -> f64 {
    let mut r = Rng::new(seed + 500);
    let n = dims(&mut r, 2, 10);
    // keep samples away from the kinks at +-1
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let v = (r.uniform() * 4.0 - 2.0) as f32;
            if (v.abs() - 1.0).abs() < 0.05 { v * 1.2 } else { v }
        })
        .collect();
    let x = tensor(&[n], data);
    check(seed, &[x], |t, v| t.clamp(v[0], -1.0, 1.0), &|x| {
        x[0].iter().map(|v| v.clamp(-1.0, 1.0)).collect()
    })
}

fn softmax64(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| o * len * inner + a * inner + i;
            let z: f64 = (0..len).map(|a| x[idx(a)].exp()).sum();
            for a in 0..len {
                out[idx(a)] = x[idx(a)].exp() / z;
            }
        }
    }
    out
}

pub fn softmax_any_axis(seed: u64) -> f64 {
    let mut r = Rng::new(seed + 600);
    let shape = [dims(&mut r, 1, 3), dims(&mut r, 1, 4), dims(&mut r, 2, 4)];
    let axis = r.below(3);
    let n: usize = shape.iter().product();
    let x = tensor(&shape, rand_vec(&mut r, n, 2.0));
    check(seed, &[x], |t, v| t.softmax(v[0], axis).unwrap(), &move |x| {
        softmax64(&x[0], &shape, axis)
    })
}

pub fn attention_softmax(seed: u64) -> f64 {
    let mut r = Rng::new(seed + 700);
    let (b, heads, l) = (dims(&mut r, 1, 2), dims(&mut r, 1, 2), dims(&mut r, 2, 5));
    let causal = r.bernoulli(0.5);
    let mut key_valid: Vec<bool> = (0..b * l).map(|_| r.bernoulli(0.7)).collect();
    for bi in 0..b {
        key_valid[bi * l] = true;
    }
    let n = b * heads * l * l;
    let x = tensor(&[b * heads, l, l], rand_vec(&mut r, n, 2.0));
    let mask = AttentionMask {
        heads,
        key_valid: Some(key_valid.clone()),
        causal,
    };
    check(seed, &[x], move |t, v| t.attention_softmax(v[0], &mask).unwrap(), &move |x| {
        let mut out = vec![0.0; n];
        for nb in 0..b * heads {
            let bi = nb / heads;
            for q in 0..l {
                let vis: Vec<usize> = (0..l)
                    .filter(|&k| key_valid[bi * l + k] && (!causal || k <= q))
                    .collect();
                let base = (nb * l + q) * l;
                let z: f64 = vis.iter().map(|&k| x[0][base + k].exp()).sum();
                for &k in &vis {
                    out[base + k] = x[0][base + k].exp() / z;
                }
            }
        }
        out
    })
}

pub fn layer_norm(seed: u64) -> f64 {
    let mut r = Rng::new(seed + 800);
    let (rows, d) = (dims(&mut r, 1, 4), dims(&mut r, 3, 6));
    let x = tensor(&[rows, d], rand_vec(&mut r, rows * d, 1.0));
    let g = tensor(&[d], rand_vec(&mut r, d, 1.0));
    let b = tensor(&[d], rand_vec(&mut r, d, 1.0));
    let eps = 1e-5;
    check(seed, &[x, g, b], move |t, v| t.layer_norm(v[0], v[1], v[2], eps).unwrap(), &move |x| {
        let mut out = Vec::new();
        for row in x[0].chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                out.push((row[j] - mean) / (var + eps as f64).sqrt() * x[1][j] + x[2][j]);
            }
        }
        out
    })
}

pub fn cross_entropy(seed: u64) -> f64 {
    let mut r = Rng::new(seed + 900);
    let (rows, classes) = (dims(&mut r, 2, 5), dims(&mut r, 2, 6));
    let mut targets: Vec<i64> = (0..rows)
        .map(|_| if r.bernoulli(0.3) { -100 } else { r.below(classes) as i64 })
        .collect();
    targets[0] = 0;
    let x = tensor(&[rows, classes], rand_vec(&mut r, rows * classes, 2.0));
    let tg = targets.clone();
    check(seed, &[x], move |t, v| t.cross_entropy(v[0], &tg, -100).unwrap(), &move |x| {
        let mut total = 0.0;
        let mut count = 0.0;
        for (row, &t) in x[0].chunks(classes).zip(&targets) {
            if t == -100 {
                continue;
            }
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
            count += 1.0;
        }
        vec![total / count]
    })
}

pub fn mse_sum_mean(seed: u64) -> f64 {
    let mut r = Rng::new(seed + 1000);
    let n = dims(&mut r, 1, 8);
    let x = tensor(&[n], rand_vec(&mut r, n, 1.0));
    let target = rand_vec(&mut r, n, 1.0);
    let t64: Vec<f64> = target.iter().map(|&v| v as f64).collect();
    let e1 = check(seed, std::slice::from_ref(&x), move |t, v| t.mse(v[0], &target).unwrap(), &move |x| {
        vec![x[0].iter().zip(&t64).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64]
    });
    let e2 = check(seed, std::slice::from_ref(&x), |t, v| t.sum(v[0]), &|x| vec![x[0].iter().sum()]);
    let e3 = check(seed, &[x], |t, v| t.mean(v[0]), &|x| {
        vec![x[0].iter().sum::<f64>() / x[0].len() as f64]
    });
    e1.max(e2).max(e3)
}

pub fn reshape_permute(seed: u64) -> f64 {
    let mut r = Rng::new(seed + 1100);
    let shape = [dims(&mut r, 1, 3), dims(&mut r, 1, 3), dims(&mut r, 1, 3), dims(&mut r, 1, 3)];
    let n: usize = shape.iter().product();
    let x = tensor(&shape, rand_vec(&mut r, n, 1.0));
    let mut perm = vec![0, 1, 2, 3];
    r.shuffle(&mut perm);
    let e1 = check(seed, std::slice::from_ref(&x), move |t, v| t.reshape(v[0], &[n]).unwrap(), &|x| x[0].clone());
    let p = perm.clone();
    let e2 = check(seed, &[x], move |t, v| t.permute(v[0], &p).unwrap(), &move |x| {
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut strides = [1usize; 4];
        for i in (0..3).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let mut out = Vec::with_capacity(n);
        for a in 0..out_shape[0] {
            for b in 0..out_shape[1] {
                for c in 0..out_shape[2] {
                    for d in 0..out_shape[3] {
                        let co = [a, b, c, d];
                        let src: usize = (0..4).map(|i| co[i] * strides[perm[i]]).sum();
                        out.push(x[0][src]);
                    }
                }
            }
        }
        out
    });
    e1.max(e2)
}

pub fn embedding_and_masked_mean(seed: u64) -> f64 {
    let mut r = Rng::new(seed + 1200);
    let (vocab, d, b, l) = (dims(&mut r, 2, 6), dims(&mut r, 1, 4), dims(&mut r, 1, 3), dims(&mut r, 1, 4));
    let ids: Vec<usize> = (0..b * l).map(|_| r.below(vocab)).collect();
    let table = tensor(&[vocab, d], rand_vec(&mut r, vocab * d, 1.0));
    let i2 = ids.clone();
    let e1 = check(seed, &[table], move |t, v| t.embedding(v[0], &i2).unwrap(), &move |x| {
        ids.iter().flat_map(|&i| x[0][i * d..(i + 1) * d].to_vec()).collect()
    });
    let mut mask: Vec<bool> = (0..b * l).map(|_| r.bernoulli(0.6)).collect();
    for bi in 0..b {
        mask[bi * l] = true;
    }
    let x = tensor(&[b, l, d], rand_vec(&mut r, b * l * d, 1.0));
    let m2 = mask.clone();
    let e2 = check(seed, &[x], move |t, v| t.masked_mean(v[0], &m2).unwrap(), &move |x| {
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let c = mask[bi * l..(bi + 1) * l].iter().filter(|&&m| m).count() as f64;
            for li in 0..l {
                if mask[bi * l + li] {
                    for j in 0..d {
                        out[bi * d + j] += x[0][(bi * l + li) * d + j] / c;
                    }
                }
            }
        }
        out
    });
    e1.max(e2)
}

pub fn concat_narrow(seed: u64) -> f64 {
    let mut r = Rng::new(seed + 1300);
    let (b, l1, l2, d) = (dims(&mut r, 1, 3), dims(&mut r, 1, 3), dims(&mut r, 1, 3), dims(&mut r, 1, 3));
    let x = tensor(&[b, l1, d], rand_vec(&mut r, b * l1 * d, 1.0));
    let y = tensor(&[b, l2, d], rand_vec(&mut r, b * l2 * d, 1.0));
    let e1 = check(seed, &[x, y], |t, v| t.concat(&[v[0], v[1]], 1).unwrap(), &move |x| {
        let mut out = Vec::new();
        for bi in 0..b {
            out.extend_from_slice(&x[0][bi * l1 * d..(bi + 1) * l1 * d]);
            out.extend_from_slice(&x[1][bi * l2 * d..(bi + 1) * l2 * d]);
        }
        out
    });
    let l = l1 + l2;
    let start = r.below(l);
    let len = 1 + r.below(l - start);
    let z = tensor(&[b, l, d], rand_vec(&mut r, b * l * d, 1.0));
    let e2 = check(seed, &[z], move |t, v| t.narrow(v[0], 1, start, len).unwrap(), &move |x| {
        let mut out = Vec::new();
        for bi in 0..b {
            out.extend_from_slice(&x[0][(bi * l + start) * d..(bi * l + start + len) * d]);
        }
        out
    });
    e1.max(e2)
}

// gelu(x·W + b) followed by a softmax: exercises gradient accumulation
// through a chain of recorded ops.
pub fn three_op_graph(seed: u64) -> f64 {
    let mut r = Rng::new(seed + 1400);
    let (m, k, n) = (dims(&mut r, 1, 3), dims(&mut r, 1, 4), dims(&mut r, 2, 4));
    let x = tensor(&[m, k], rand_vec(&mut r, m * k, 1.0));
    let w = tensor(&[k, n], rand_vec(&mut r, k * n, 1.0));
    let b = tensor(&[n], rand_vec(&mut r, n, 1.0));
    check(
        seed,
        &[x, w, b],
        |t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add_bias(h, v[2]).unwrap();
            let h = t.gelu(h);
            t.softmax(h, 1).unwrap()
        },
        &move |x| {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            let h: Vec<f64> = gemm64(&x[0], &x[1], m, k, n)
                .iter()
                .enumerate()
                .map(|(i, v)| v + x[2][i % n])
                .map(|v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh()))
                .collect();
            softmax64(&h, &[m, n], 1)
        },
    )
}

pub type Case = fn(u64) -> f64;

// Read by the acceptance run; the core tests call each case by name.
#[allow(dead_code)]
pub const CASES: &[(&str, Case)] = &[
    ("matmul", matmul),
    ("batch_matmul", batch_matmul),
    ("add/sub/mul", elementwise_binary),
    ("add_bias", add_bias),
    ("affine/mul_const/exp/gelu", unary),
    ("clamp", clamp),
    ("softmax", softmax_any_axis),
    ("attention_softmax", attention_softmax),
    ("layer_norm", layer_norm),
    ("cross_entropy", cross_entropy),
    ("mse/sum/mean", mse_sum_mean),
    ("reshape/permute", reshape_permute),
    ("embedding/masked_mean", embedding_and_masked_mean),
    ("concat/narrow", concat_narrow),
    ("matmul+bias+gelu+softmax", three_op_graph),
];

/// Worst error of `case` over seeds `0..INSTANCES`.
pub fn worst(case: Case) -> f64 {
    (0..INSTANCES).map(case).fold(0.0, f64::max)
}

/// Tolerance for the whole-model check, which differences the f32 engine itself.
pub const END_TO_END_TOL: f64 = 1e-2;
const END_TO_END_H: f32 = 5e-3;

/// Masked-LM loss of a tiny two-layer encoder. Backward gradients of every
/// parameter scalar are compared with central differences of the f32 forward
/// pass. Weights are re-drawn at scale 0.3 so that every layer carries signal.
pub fn mlm_end_to_end(seed: u64) -> f64 {
    let cfg = EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 8,
        ffn_dim: 16,
        max_len: 14,
        dropout_rate: 0.0,
        seed,
        ..Default::default()
    };
    let mut model = EncoderModel::new(cfg).unwrap();
    let mut r = Rng::derive(seed, 7);
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        for v in model.params.get_mut(id).data_mut() {
            *v += (r.normal() * 0.3) as f32;
        }
    }

    let seqs: Vec<String> = (0..3)
        .map(|_| {
            let len = dims(&mut r, 4, 12);
            (0..len).map(|_| STANDARD_RESIDUES[r.below(20)] as char).collect()
        })
        .collect();
    let (tokens, _) = Batch::from_sequences(seqs.iter().map(String::as_str), cfg.max_len).unwrap();
    let policy = MaskingPolicy {
        select_rate: 0.4,
        ..Default::default()
    };
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for t in &tokens {
        let m = apply_mlm_mask_with(t, &policy, &mut r);
        inputs.push(TokenSequence {
            ids: m.ids,
            attention_mask: t.attention_mask.clone(),
            true_length: t.true_length,
        });
        targets.extend(m.labels);
    }
    if targets.iter().all(|&t| t == IGNORE_INDEX) {
        // position 1 is the first residue after [CLS]
        targets[1] = tokens[0].ids[1] as i64;
    }

    let loss_of = |m: &EncoderModel| -> f64 {
        let mut tape = Tape::new();
        let l = mlm_loss_eval(m, &mut tape, &inputs, &targets).unwrap();
        tape.value(l)[0] as f64
    };
    model.params.zero_grad();
    let mut tape = Tape::new();
    let loss = mlm_loss_eval(&model, &mut tape, &inputs, &targets).unwrap();
    tape.backward_into(loss, &mut [&mut model.params]).unwrap();
    drop(tape);

    let mut num = 0.0;
    let mut diff = 0.0;
    for &id in &ids {
        let analytic = model.params.get(id).grad.clone().expect("gradient for every parameter");
        for (j, &a) in analytic.iter().enumerate() {
            let orig = model.params.get(id).data()[j];
            model.params.get_mut(id).data_mut()[j] = orig + END_TO_END_H;
            let up = loss_of(&model);
            model.params.get_mut(id).data_mut()[j] = orig - END_TO_END_H;
            let down = loss_of(&model);
            model.params.get_mut(id).data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * END_TO_END_H as f64);
            num += fd * fd;
            diff += (fd - a as f64).powi(2);
        }
    }
    diff.sqrt() / num.sqrt().max(1e-12)
}
