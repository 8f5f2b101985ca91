use std::rc::Rc;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_A: f32 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which keys each query may attend to.
///
/// Scores have shape `[batch * heads, queries, keys]`. A key is visible when
/// its `key_valid` entry (indexed `[batch, key]`) is set and, for causal
/// attention, when `key <= query`. Invisible keys get exactly zero weight.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub heads: usize,
    pub key_valid: Option<Vec<bool>>,
    pub causal: bool,
}

#[derive(Debug, Clone, Copy)]
struct ParamRef {
    store: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamRef>),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Affine {
        x: usize,
        scale: f32,
    },
    MulConst {
        x: usize,
        factor: Vec<f32>,
    },
    Exp(usize),
    Gelu(usize),
    Clamp {
        x: usize,
        lo: f32,
        hi: f32,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    AttentionSoftmax {
        x: usize,
        rows: usize,
        keys: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<i64>,
        ignore_index: i64,
        probs: Vec<f32>,
        count: usize,
    },
    Mse {
        pred: usize,
        target: Vec<f32>,
    },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Permute {
        x: usize,
        in_index: Rc<[usize]>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    MaskedMean {
        x: usize,
        mask: Vec<f32>,
        counts: Vec<f32>,
        seq: usize,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        spans: Vec<usize>,
    },
    Narrow {
        x: usize,
        outer: usize,
        src_span: usize,
        offset: usize,
        span: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient with respect to a leaf (`None` if it did not require grad).
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `c[m×n] += a[m×k] · b[k×n]`, accumulating over `k` in index order.
fn gemm_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_tn_acc(a: &[f32], g: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += av * gv;
            }
        }
    }
}

fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn gelu_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First element of a value; meant for scalar losses.
    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node is well formed")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Record a standalone tensor. Its gradient is available from
    /// [`Gradients::wrt`] when `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf(None),
            tensor.requires_grad,
        )
    }

    /// Record a value that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f32>) -> Result<Var> {
        if numel(&shape) != value.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "constant of shape {shape:?} with {} values",
                value.len()
            )));
        }
        Ok(self.push(shape, value, Op::Leaf(None), false))
    }

    /// Record a parameter read from `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf(Some(ParamRef {
                store: store.uid(),
                index: id.0,
            })),
            t.requires_grad,
        )
    }

    /// Matrix product. `a` may carry leading dimensions, which are flattened
    /// into rows; `b` must be a matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Batched product of `[N, m, k]` with `[N, k, n]`, or with `[N, n, k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::shape(format!("batch_matmul {sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                let a_blk = &av[i * m * k..(i + 1) * m * k];
                let b_blk = &bv[i * k * n..(i + 1) * k * n];
                let c_blk = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    let bt = transpose(b_blk, n, k);
                    gemm_acc(a_blk, &bt, c_blk, m, k, n);
                } else {
                    gemm_acc(a_blk, b_blk, c_blk, m, k, n);
                }
            }
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(self.shape(a).to_vec(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Add a vector over the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        let n = *sx.last().expect("shapes are non-empty");
        if sb.len() != 1 || sb[0] != n {
            return Err(Error::shape(format!("add_bias {sx:?} + {sb:?}")));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x.0) || self.rg(bias.0);
        Ok(self.push(sx, out, Op::AddBias { x: x.0, bias: bias.0 }, rg))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        let out = self.value(x).iter().map(|&v| scale * v + shift).collect();
        let rg = self.rg(x.0);
        self.push(self.shape(x).to_vec(), out, Op::Affine { x: x.0, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: f32) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f32>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(Error::shape(format!(
                "mul_const: {} values for shape {:?}",
                factor.len(),
                self.shape(x)
            )));
        }
        let out = self.value(x).iter().zip(&factor).map(|(a, b)| a * b).collect();
        let rg = self.rg(x.0);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulConst { x: x.0, factor }, rg))
    }

    /// Inverted dropout with a precomputed keep mask. `keep` holds 0/1.
    pub fn dropout(&mut self, x: Var, keep: &[bool], rate: f32) -> Result<Var> {
        let s = 1.0 / (1.0 - rate);
        let factor = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        self.mul_const(x, factor)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        let rg = self.rg(x.0);
        self.push(self.shape(x).to_vec(), out, Op::Exp(x.0), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.rg(x.0);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x.0), rg)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let out = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let rg = self.rg(x.0);
        self.push(self.shape(x).to_vec(), out, Op::Clamp { x: x.0, lo, hi }, rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| o * len * inner + a * inner + i;
                let max = (0..len).map(|a| xv[idx(a)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for a in 0..len {
                    let e = (xv[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    out[idx(a)] /= sum;
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x: x.0,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Softmax over the last axis of `[batch * heads, queries, keys]` scores
    /// with invisible keys excluded. A row with no visible key is all zeros.
    pub fn attention_softmax(&mut self, x: Var, mask: &AttentionMask) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || mask.heads == 0 || !shape[0].is_multiple_of(mask.heads) {
            return Err(Error::shape(format!(
                "attention scores {shape:?} with {} heads",
                mask.heads
            )));
        }
        let (nb, lq, lk) = (shape[0], shape[1], shape[2]);
        let batch = nb / mask.heads;
        if let Some(kv) = &mask.key_valid {
            if kv.len() != batch * lk {
                return Err(Error::shape(format!(
                    "key mask of {} entries for batch {batch} x {lk} keys",
                    kv.len()
                )));
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for n in 0..nb {
            let b = n / mask.heads;
            for q in 0..lq {
                let base = (n * lq + q) * lk;
                let visible = |k: usize| {
                    (!mask.causal || k <= q)
                        && mask.key_valid.as_ref().is_none_or(|kv| kv[b * lk + k])
                };
                let mut max = f32::NEG_INFINITY;
                for k in 0..lk {
                    if visible(k) {
                        max = max.max(xv[base + k]);
                    }
                }
                if max == f32::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for k in 0..lk {
                    if visible(k) {
                        let e = (xv[base + k] - max).exp();
                        out[base + k] = e;
                        sum += e;
                    }
                }
                for v in &mut out[base..base + lk] {
                    *v /= sum;
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            shape,
            out,
            Op::AttentionSoftmax {
                x: x.0,
                rows: nb * lq,
                keys: lk,
            },
            rg,
        ))
    }

    /// Normalize over the last dimension, then scale by `gamma` and shift by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("shapes are non-empty");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm over {d} with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::invalid(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood over rows whose target is not
    /// `ignore_index`. When every row is ignored the loss is 0 and no
    /// gradient flows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(format!(
                "cross_entropy logits {shape:?} with {} targets",
                targets.len()
            )));
        }
        let (rows, classes) = (shape[0], shape[1]);
        for (i, &t) in targets.iter().enumerate() {
            if t != ignore_index && (t < 0 || t as usize >= classes) {
                return Err(Error::invalid(format!(
                    "target {t} at row {i} outside [0, {classes})"
                )));
            }
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0f32;
        let mut count = 0usize;
        for r in 0..rows {
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp();
                sum += *p;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p /= sum;
            }
            let t = targets[r];
            if t != ignore_index {
                total += max + sum.ln() - row[t as usize];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f32 };
        let rg = self.rg(logits.0);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean squared error against constant targets.
    pub fn mse(&mut self, pred: Var, target: &[f32]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(Error::shape(format!(
                "mse: {} predictions, {} targets",
                pv.len(),
                target.len()
            )));
        }
        let loss = pv
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f32>()
            / pv.len() as f32;
        let rg = self.rg(pred.0);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Mse {
                pred: pred.0,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x.0);
        self.push(vec![1], vec![s], Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f32>() / v.len() as f32;
        let rg = self.rg(x.0);
        self.push(vec![1], vec![s], Op::Mean(x.0), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x.0), rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("permute {shape:?} by {perm:?}")));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let total = numel(&shape);
        let mut in_index = Vec::with_capacity(total);
        let mut coord = vec![0usize; rank];
        for _ in 0..total {
            let src: usize = coord
                .iter()
                .zip(perm)
                .map(|(&c, &p)| c * in_strides[p])
                .sum();
            in_index.push(src);
            for ax in (0..rank).rev() {
                coord[ax] += 1;
                if coord[ax] < out_shape[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }
        let xv = self.value(x);
        let out = in_index.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x.0);
        Ok(self.push(
            out_shape,
            out,
            Op::Permute {
                x: x.0,
                in_index: in_index.into(),
            },
            rg,
        ))
    }

    /// Gather rows of a `[vocab, d]` table; output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids.is_empty() {
            return Err(Error::shape(format!("embedding table {st:?}")));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!("embedding id {bad} >= {vocab}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table.0);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean of `[B, L, d]` over the positions whose mask is set; output `[B, d]`.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || mask.len() != shape[0] * shape[1] {
            return Err(Error::shape(format!(
                "masked_mean over {shape:?} with {} mask entries",
                mask.len()
            )));
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let mut counts = vec![0.0f32; b];
        for (bi, c) in counts.iter_mut().enumerate() {
            *c = mask[bi * l..(bi + 1) * l].iter().filter(|&&m| m).count() as f32;
            if *c == 0.0 {
                return Err(Error::invalid(format!("row {bi} has no valid positions to pool")));
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for li in 0..l {
                if mask[bi * l + li] {
                    let row = &xv[(bi * l + li) * d..(bi * l + li + 1) * d];
                    for (ov, &rv) in o.iter_mut().zip(row) {
                        *ov += rv;
                    }
                }
            }
            for ov in o.iter_mut() {
                *ov /= counts[bi];
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            vec![b, d],
            out,
            Op::MaskedMean {
                x: x.0,
                mask: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
                counts,
                seq: l,
            },
            rg,
        ))
    }

    /// Concatenate along `axis`; every other dimension must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} for {base:?}")));
        }
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat {base:?} with {s:?}")));
            }
            total_axis += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let spans: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (&p, &span) in parts.iter().zip(&spans) {
                out.extend_from_slice(&self.value(p)[o * span..(o + 1) * span]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: parts.iter().map(|p| p.0).collect(),
                outer,
                spans,
            },
            rg,
        ))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow {shape:?} axis {axis} [{start}, {})",
                start + len
            )));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src_span = full * inner;
        let span = len * inner;
        let offset = start * inner;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * span);
        for o in 0..outer {
            out.extend_from_slice(&xv[o * src_span + offset..o * src_span + offset + span]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x.0);
        Ok(self.push(
            out_shape,
            out,
            Op::Narrow {
                x: x.0,
                outer,
                src_span,
                offset,
                span,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Gradient("loss is not on this tape".into()))?;
        if node.value.len() != 1 {
            return Err(Error::Gradient(format!(
                "loss must be scalar, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf(_)) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Backward sweep that writes parameter gradients into `stores`.
    ///
    /// Every trainable parameter of each store receives a gradient; those not
    /// reached by the graph get zeros. Fails without writing anything if a
    /// target parameter still holds a gradient from an earlier sweep.
    pub fn backward_into(&self, loss: Var, stores: &mut [&mut ParamStore]) -> Result<()> {
        for store in stores.iter() {
            if let Some((name, _)) = store
                .iter()
                .find(|(_, t)| t.requires_grad && t.grad.is_some())
            {
                return Err(Error::Gradient(format!(
                    "parameter {name} already has a gradient; call zero_grad before backward"
                )));
            }
        }
        let grads = self.backward(loss)?;
        for store in stores.iter_mut() {
            let uid = store.uid();
            let tensors = store.tensors_mut();
            for (i, node) in self.nodes.iter().enumerate() {
                let Op::Leaf(Some(r)) = node.op else { continue };
                if r.store != uid || !tensors[r.index].requires_grad {
                    continue;
                }
                let Some(g) = grads.grads[i].as_ref() else { continue };
                let slot = tensors[r.index]
                    .grad
                    .get_or_insert_with(|| vec![0.0; g.len()]);
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
            for t in tensors.iter_mut() {
                if t.requires_grad && t.grad.is_none() {
                    t.grad = Some(vec![0.0; t.numel()]);
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let mut acc = |idx: usize, f: &mut dyn FnMut(&mut [f32])| {
            if nodes[idx].requires_grad {
                let slot = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.len()]);
                f(slot);
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf(_) => {}
            &Op::MatMul { a, b, m, k, n } => {
                let av = &nodes[a].value;
                let bv = &nodes[b].value;
                acc(a, &mut |ga| {
                    let bt = transpose(bv, k, n);
                    gemm_acc(g, &bt, ga, m, n, k);
                });
                acc(b, &mut |gb| gemm_tn_acc(av, g, gb, m, k, n));
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let av = &nodes[a].value;
                let bv = &nodes[b].value;
                acc(a, &mut |ga| {
                    for t in 0..batch {
                        let g_blk = &g[t * m * n..(t + 1) * m * n];
                        let b_blk = &bv[t * k * n..(t + 1) * k * n];
                        let ga_blk = &mut ga[t * m * k..(t + 1) * m * k];
                        if trans_b {
                            // out = a·bᵀ with b [n×k]: dA = g·b
                            gemm_acc(g_blk, b_blk, ga_blk, m, n, k);
                        } else {
                            let bt = transpose(b_blk, k, n);
                            gemm_acc(g_blk, &bt, ga_blk, m, n, k);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for t in 0..batch {
                        let g_blk = &g[t * m * n..(t + 1) * m * n];
                        let a_blk = &av[t * m * k..(t + 1) * m * k];
                        let gb_blk = &mut gb[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            // dB [n×k] = gᵀ·a
                            gemm_tn_acc(g_blk, a_blk, gb_blk, m, n, k);
                        } else {
                            gemm_tn_acc(a_blk, g_blk, gb_blk, m, k, n);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| {
                    for (s, v) in gb.iter_mut().zip(g) {
                        *s -= v;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let av = &nodes[a].value;
                let bv = &nodes[b].value;
                acc(a, &mut |ga| {
                    for ((s, gv), bx) in ga.iter_mut().zip(g).zip(bv) {
                        *s += gv * bx;
                    }
                });
                acc(b, &mut |gb| {
                    for ((s, gv), ax) in gb.iter_mut().zip(g).zip(av) {
                        *s += gv * ax;
                    }
                });
            }
            &Op::AddBias { x, bias } => {
                acc(x, &mut |gx| add_into(gx, g));
                acc(bias, &mut |gb| {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::Affine { x, scale } => {
                acc(x, &mut |gx| {
                    for (s, v) in gx.iter_mut().zip(g) {
                        *s += scale * v;
                    }
                });
            }
            Op::MulConst { x, factor } => {
                acc(*x, &mut |gx| {
                    for ((s, v), f) in gx.iter_mut().zip(g).zip(factor) {
                        *s += v * f;
                    }
                });
            }
            &Op::Exp(x) => {
                acc(x, &mut |gx| {
                    for ((s, v), y) in gx.iter_mut().zip(g).zip(out) {
                        *s += v * y;
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = &nodes[x].value;
                acc(x, &mut |gx| {
                    for ((s, v), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *s += v * gelu_grad(xi);
                    }
                });
            }
            &Op::Clamp { x, lo, hi } => {
                let xv = &nodes[x].value;
                acc(x, &mut |gx| {
                    for ((s, v), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi >= lo && xi <= hi {
                            *s += v;
                        }
                    }
                });
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| o * len * inner + a * inner + i;
                            let dot: f32 = (0..len).map(|a| g[idx(a)] * out[idx(a)]).sum();
                            for a in 0..len {
                                gx[idx(a)] += out[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                });
            }
            &Op::AttentionSoftmax { x, rows, keys } => {
                acc(x, &mut |gx| {
                    for r in 0..rows {
                        let y = &out[r * keys..(r + 1) * keys];
                        let gr = &g[r * keys..(r + 1) * keys];
                        let dot: f32 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((s, &yv), &gv) in gx[r * keys..(r + 1) * keys].iter_mut().zip(y).zip(gr) {
                            *s += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[*gamma].value.len();
                let gv = &nodes[*gamma].value;
                acc(*gamma, &mut |gg| {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((s, a), h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *s += a * h;
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for grow in g.chunks_exact(d) {
                        add_into(gb, grow);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dh = vec![0.0f32; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f32>() / d as f32;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                        for j in 0..d {
                            gx[r * d + j] += rs * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let classes = probs.len() / targets.len();
                let scale = g[0] / *count as f32;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        let p = &probs[r * classes..(r + 1) * classes];
                        let gr = &mut gl[r * classes..(r + 1) * classes];
                        for (s, &pv) in gr.iter_mut().zip(p) {
                            *s += scale * pv;
                        }
                        gr[t as usize] -= scale;
                    }
                });
            }
            Op::Mse { pred, target } => {
                let pv = &nodes[*pred].value;
                let scale = 2.0 * g[0] / target.len() as f32;
                acc(*pred, &mut |gp| {
                    for ((s, p), t) in gp.iter_mut().zip(pv).zip(target) {
                        *s += scale * (p - t);
                    }
                });
            }
            &Op::Sum(x) => {
                acc(x, &mut |gx| gx.iter_mut().for_each(|s| *s += g[0]));
            }
            &Op::Mean(x) => {
                let n = nodes[x].value.len() as f32;
                acc(x, &mut |gx| gx.iter_mut().for_each(|s| *s += g[0] / n));
            }
            &Op::Reshape(x) => {
                acc(x, &mut |gx| add_into(gx, g));
            }
            Op::Permute { x, in_index } => {
                acc(*x, &mut |gx| {
                    for (&src, &gv) in in_index.iter().zip(g) {
                        gx[src] += gv;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[*table].shape[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::MaskedMean {
                x,
                mask,
                counts,
                seq,
            } => {
                let d = nodes[*x].shape[2];
                acc(*x, &mut |gx| {
                    for (bi, &c) in counts.iter().enumerate() {
                        for li in 0..*seq {
                            let w = mask[bi * seq + li] / c;
                            if w == 0.0 {
                                continue;
                            }
                            let base = (bi * seq + li) * d;
                            for j in 0..d {
                                gx[base + j] += w * g[bi * d + j];
                            }
                        }
                    }
                });
            }
            Op::Concat {
                inputs,
                outer,
                spans,
            } => {
                let total: usize = spans.iter().sum();
                let mut start = 0;
                for (&inp, &span) in inputs.iter().zip(spans) {
                    acc(inp, &mut |gi| {
                        for o in 0..*outer {
                            add_into(
                                &mut gi[o * span..(o + 1) * span],
                                &g[o * total + start..o * total + start + span],
                            );
                        }
                    });
                    start += span;
                }
            }
            &Op::Narrow {
                x,
                outer,
                src_span,
                offset,
                span,
            } => {
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        add_into(
                            &mut gx[o * src_span + offset..o * src_span + offset + span],
                            &g[o * span..(o + 1) * span],
                        );
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
