use std::sync::Arc;

use super::backend::{Backend, Strides};
use super::kernels;
use super::{round_to_half, Precision, Tensor};
use crate::error::{Error, OpKind, Pass, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed rotary angles for positions `0..max_positions`.
#[derive(Clone, Debug)]
pub struct RopeTable {
    cos: Vec<f32>,
    sin: Vec<f32>,
    pairs: usize,
    max_positions: usize,
}

impl RopeTable {
    /// Pair `i` at position `p` is rotated by `p * base^(-2i / d_head)`.
    pub fn new(d_head: usize, max_positions: usize, base: f64) -> Result<Self> {
        if d_head == 0 || d_head % 2 != 0 {
            return Err(Error::Contract(format!(
                "rotary head width must be even and non-zero, got {d_head}"
            )));
        }
        let pairs = d_head / 2;
        let mut cos = Vec::with_capacity(max_positions * pairs);
        let mut sin = Vec::with_capacity(max_positions * pairs);
        for pos in 0..max_positions {
            for i in 0..pairs {
                let theta = base.powf(-2.0 * i as f64 / d_head as f64);
                let angle = pos as f64 * theta;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Ok(Self {
            cos,
            sin,
            pairs,
            max_positions,
        })
    }

    pub fn d_head(&self) -> usize {
        self.pairs * 2
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    fn check(&self, pos: usize) -> Result<()> {
        if pos >= self.max_positions {
            return Err(Error::Contract(format!(
                "rotary position {pos} outside the context window of {}",
                self.max_positions
            )));
        }
        Ok(())
    }

    fn angles(&self, pos: usize) -> (&[f32], &[f32]) {
        let start = pos * self.pairs;
        (
            &self.cos[start..start + self.pairs],
            &self.sin[start..start + self.pairs],
        )
    }

    /// Rotates one head vector in place.
    pub fn rotate(&self, x: &mut [f32], pos: usize) -> Result<()> {
        self.check(pos)?;
        if x.len() != self.d_head() {
            return Err(Error::dim(
                OpKind::Rope,
                format!("head width {} != table width {}", x.len(), self.d_head()),
            ));
        }
        let (c, s) = self.angles(pos);
        kernels::rotate_pairs(x, c, s);
        Ok(())
    }
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var, rows: usize, k: usize, n: usize },
    MatmulTransposed { a: Var, b: Var, rows: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f32 },
    Gelu { a: Var },
    Exp { a: Var },
    Rsqrt { a: Var },
    Softmax { a: Var },
    Sum { a: Var },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f32> },
    Rope { x: Var, table: Arc<RopeTable>, start: usize },
    Embedding { table: Var, ids: Vec<u32> },
    CausalAttention { q: Var, k: Var, v: Var, heads: usize, lse: Vec<f32> },
    CrossEntropy { logits: Var, targets: Vec<u32> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::MatmulTransposed { .. } => OpKind::MatmulTransposed,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Exp { .. } => OpKind::Exp,
            Op::Rsqrt { .. } => OpKind::Rsqrt,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Sum { .. } => OpKind::Sum,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::Rope { .. } => OpKind::Rope,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::CausalAttention { .. } => OpKind::CausalAttention,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn saved_bytes(&self) -> usize {
        4 * match self {
            Op::RmsNorm { inv_rms, .. } => inv_rms.len(),
            Op::Embedding { ids, .. } => ids.len(),
            Op::CausalAttention { lse, .. } => lse.len(),
            Op::CrossEntropy { targets, .. } => targets.len(),
            _ => 0,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], one per trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Records executed operations in order so gradients can be replayed in
/// reverse. One tape per forward pass; it is not shared across threads.
pub struct Tape {
    nodes: Vec<Node>,
    backend: Arc<dyn Backend>,
    precision: Precision,
}

fn trailing_broadcast(op: OpKind, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(Error::dim(
            op,
            format!("cannot broadcast {b:?} onto {a:?}; only trailing axes broadcast"),
        ))
    }
}

fn three_axes(op: OpKind, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, t, d] => Ok((b, t, d)),
        _ => Err(Error::dim(op, format!("expected [batch, seq, width], got {shape:?}"))),
    }
}

impl Tape {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self::with_precision(backend, Precision::Full)
    }

    /// A tape whose activations are stored in `precision`. Parameters,
    /// reductions, softmax outputs and the loss always stay full precision.
    pub fn with_precision(backend: Arc<dyn Backend>, precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            backend,
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    /// Bytes held by recorded activations and the state saved for their
    /// backward rules. Leaves are excluded.
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.value.nbytes() + n.op.saved_bytes())
            .sum()
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable,
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn storage_for(&self, kind: OpKind) -> Precision {
        match (self.precision, kind) {
            (Precision::Full, _) => Precision::Full,
            (_, OpKind::Softmax | OpKind::Sum | OpKind::CrossEntropy) => Precision::Full,
            (p, _) => p,
        }
    }

    fn push(&mut self, op: Op, shape: &[usize], data: Vec<f32>, inputs: &[Var]) -> Result<Var> {
        let kind = op.kind();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: kind,
                pass: Pass::Forward,
            });
        }
        let value = Tensor::with_precision(shape, data, self.storage_for(kind))?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: kind,
                pass: Pass::Forward,
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a·b` where `a` is `[.., k]` (leading axes flattened) and `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = OpKind::Matmul;
        let (a_shape, b_shape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (k, n) = match (a_shape.last(), b_shape.as_slice()) {
            (Some(&ka), &[kb, n]) if ka == kb => (ka, n),
            _ => {
                return Err(Error::dim(
                    op,
                    format!("inner extents differ: {a_shape:?} · {b_shape:?}"),
                ))
            }
        };
        let rows = a_shape[..a_shape.len() - 1].iter().product::<usize>();
        let mut out = vec![0.0; rows * n];
        {
            let av = self.value(a).values();
            let bv = self.value(b).values();
            self.backend.gemm(
                rows,
                k,
                n,
                1.0,
                &av,
                Strides::row_major(k),
                &bv,
                Strides::row_major(n),
                0.0,
                &mut out,
                Strides::row_major(n),
            );
        }
        let mut shape = a_shape;
        *shape.last_mut().expect("non-empty") = n;
        self.push(Op::Matmul { a, b, rows, k, n }, &shape, out, &[a, b])
    }

    /// `a·bᵀ` where `a` is `[.., k]` and `b` is `[n, k]`.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = OpKind::MatmulTransposed;
        let (a_shape, b_shape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (k, n) = match (a_shape.last(), b_shape.as_slice()) {
            (Some(&ka), &[n, kb]) if ka == kb => (ka, n),
            _ => {
                return Err(Error::dim(
                    op,
                    format!("inner extents differ: {a_shape:?} · {b_shape:?}ᵀ"),
                ))
            }
        };
        let rows = a_shape[..a_shape.len() - 1].iter().product::<usize>();
        let mut out = vec![0.0; rows * n];
        {
            let av = self.value(a).values();
            let bv = self.value(b).values();
            self.backend.gemm(
                rows,
                k,
                n,
                1.0,
                &av,
                Strides::row_major(k),
                &bv,
                Strides::transposed(k),
                0.0,
                &mut out,
                Strides::row_major(n),
            );
        }
        let mut shape = a_shape;
        *shape.last_mut().expect("non-empty") = n;
        self.push(Op::MatmulTransposed { a, b, rows, k, n }, &shape, out, &[a, b])
    }

    fn binary(&mut self, kind: OpKind, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        trailing_broadcast(kind, &shape, self.shape(b))?;
        let out = {
            let av = self.value(a).values();
            let bv = self.value(b).values();
            let blen = bv.len();
            av.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % blen]))
                .collect()
        };
        let op = match kind {
            OpKind::Add => Op::Add { a, b },
            _ => Op::Mul { a, b },
        };
        self.push(op, &shape, out, &[a, b])
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, a, b, |x, y| x + y)
    }

    /// Elementwise product; `b` may broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, a, b, |x, y| x * y)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f32) -> f32) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).values().iter().map(|&x| f(x)).collect();
        self.push(op, &shape, out, &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        self.unary(Op::Scale { a, factor }, a, |x| x * factor)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Gelu { a }, a, kernels::gelu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp { a }, a, f32::exp)
    }

    /// `1 / sqrt(x)`; non-positive inputs raise a non-finite error.
    pub fn rsqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Rsqrt { a }, a, |x| 1.0 / x.sqrt())
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().unwrap_or(&1);
        let mut out = self.value(a).values().into_owned();
        if width > 0 {
            for row in out.chunks_exact_mut(width) {
                kernels::softmax_in_place(row);
            }
        }
        self.push(Op::Softmax { a }, &shape, out, &[a])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).values().iter().sum();
        self.push(Op::Sum { a }, &[], vec![total], &[a])
    }

    /// Root-mean-square normalisation over the last axis with a learned gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        let op = OpKind::RmsNorm;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim(op, "scalar input"))?;
        if self.shape(gain) != [d] {
            return Err(Error::dim(
                op,
                format!("gain {:?} does not match width {d}", self.shape(gain)),
            ));
        }
        let (out, inv_rms) = {
            let xv = self.value(x).values();
            let gv = self.value(gain).values();
            let mut out = vec![0.0; xv.len()];
            let inv_rms = xv
                .chunks_exact(d)
                .zip(out.chunks_exact_mut(d))
                .map(|(row, o)| kernels::rmsnorm_row(row, &gv, eps, o))
                .collect();
            (out, inv_rms)
        };
        self.push(Op::RmsNorm { x, gain, inv_rms }, &shape, out, &[x, gain])
    }

    /// Rotary embedding of a `[batch, seq, heads·d_head]` projection. Token
    /// `t` of every row sits at position `start + t`.
    pub fn rope(&mut self, x: Var, table: Arc<RopeTable>, heads: usize, start: usize) -> Result<Var> {
        let op = OpKind::Rope;
        let shape = self.shape(x).to_vec();
        let (_, seq, width) = three_axes(op, &shape)?;
        if heads == 0 || width != heads * table.d_head() {
            return Err(Error::dim(
                op,
                format!("width {width} is not {heads} heads of {}", table.d_head()),
            ));
        }
        if seq > 0 {
            table.check(start + seq - 1)?;
        }
        let mut out = self.value(x).values().into_owned();
        let dh = table.d_head();
        for (r, row) in out.chunks_exact_mut(width).enumerate() {
            let (c, s) = table.angles(start + r % seq);
            for head in row.chunks_exact_mut(dh) {
                kernels::rotate_pairs(head, c, s);
            }
        }
        self.push(Op::Rope { x, table, start }, &shape, out, &[x])
    }

    /// Gathers rows of a `[vocab, width]` table. `shape` gives the leading
    /// axes of the output and must hold `ids.len()` elements.
    pub fn embedding(&mut self, table: Var, ids: &[u32], shape: &[usize]) -> Result<Var> {
        let op = OpKind::Embedding;
        let (vocab, width) = match *self.shape(table) {
            [v, w] => (v, w),
            ref s => return Err(Error::dim(op, format!("table must be 2-d, got {s:?}"))),
        };
        if shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim(op, format!("{} ids do not fill {shape:?}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let out = {
            let tv = self.value(table).values();
            let mut out = Vec::with_capacity(ids.len() * width);
            for &id in ids {
                let start = id as usize * width;
                out.extend_from_slice(&tv[start..start + width]);
            }
            out
        };
        let mut out_shape = shape.to_vec();
        out_shape.push(width);
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &out_shape,
            out,
            &[table],
        )
    }

    /// Multi-head causal self-attention over `[batch, seq, heads·d_head]`
    /// inputs. Scores are scaled by `1/sqrt(d_head)` and key positions after
    /// the query are masked. Computed in full precision regardless of the
    /// tape's storage class.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let op = OpKind::CausalAttention;
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::dim(op, "q, k and v shapes differ"));
        }
        let (batch, seq, width) = three_axes(op, &shape)?;
        if heads == 0 || width % heads != 0 {
            return Err(Error::dim(op, format!("width {width} not divisible by {heads} heads")));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut out = vec![0.0; batch * seq * width];
        let mut lse = vec![0.0; batch * heads * seq];
        {
            let qv = self.value(q).values();
            let kv = self.value(k).values();
            let vv = self.value(v).values();
            let mut probs = vec![0.0; seq * seq];
            for b in 0..batch {
                for h in 0..heads {
                    let off = b * seq * width + h * dh;
                    self.backend.gemm(
                        seq,
                        dh,
                        seq,
                        scale,
                        &qv[off..],
                        Strides::row_major(width),
                        &kv[off..],
                        Strides::transposed(width),
                        0.0,
                        &mut probs,
                        Strides::row_major(seq),
                    );
                    for i in 0..seq {
                        let row = &mut probs[i * seq..(i + 1) * seq];
                        lse[(b * heads + h) * seq + i] = kernels::softmax_in_place(&mut row[..=i]);
                        row[i + 1..].fill(0.0);
                    }
                    self.backend.gemm(
                        seq,
                        seq,
                        dh,
                        1.0,
                        &probs,
                        Strides::row_major(seq),
                        &vv[off..],
                        Strides::row_major(width),
                        0.0,
                        &mut out[off..],
                        Strides::row_major(width),
                    );
                }
            }
        }
        self.push(Op::CausalAttention { q, k, v, heads, lse }, &shape, out, &[q, k, v])
    }

    /// Mean token cross-entropy of `[.., vocab]` logits against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let op = OpKind::CrossEntropy;
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().ok_or_else(|| Error::dim(op, "scalar logits"))?;
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        if rows != targets.len() || rows == 0 {
            return Err(Error::dim(
                op,
                format!("{} targets for {rows} logit rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Data(format!("target id {bad} outside vocabulary of {vocab}")));
        }
        let loss = {
            let lv = self.value(logits).values();
            let total: f64 = lv
                .chunks_exact(vocab)
                .zip(targets)
                .map(|(row, &t)| (kernels::log_sum_exp(row) - row[t as usize]) as f64)
                .sum();
            (total / rows as f64) as f32
        };
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[],
            vec![loss],
            &[logits],
        )
    }

    /// Reverse-mode sweep from a scalar `loss`. Every trainable leaf gets a
    /// gradient of its own shape; leaves off the loss path get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Backward pass seeded with `seed` instead of one. Mixed-precision
    /// training passes the loss scale here so the scaled loss itself is
    /// never materialised in half storage.
    pub fn backward_scaled(&self, loss: Var, seed: f32) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![seed]);

        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.value.precision() == Precision::Half {
                round_to_half(&mut g);
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    op: node.op.kind(),
                    pass: Pass::Backward,
                });
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.trainable {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor::new(node.value.shape(), data).expect("gradient matches leaf shape"))
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f32>>], var: Var) -> &'g mut Vec<f32> {
        let len = self.nodes[var.0].value.len();
        grads[var.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backward_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let be = self.backend.as_ref();
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul { a, b, rows, k, n } => {
                if self.wants(a) {
                    let bv = self.value(b).values();
                    let ga = self.slot(grads, a);
                    be.gemm(rows, n, k, 1.0, g, Strides::row_major(n), &bv, Strides::transposed(n), 1.0, ga, Strides::row_major(k));
                }
                if self.wants(b) {
                    let av = self.value(a).values();
                    let gb = self.slot(grads, b);
                    be.gemm(k, rows, n, 1.0, &av, Strides::transposed(k), g, Strides::row_major(n), 1.0, gb, Strides::row_major(n));
                }
            }
            &Op::MatmulTransposed { a, b, rows, k, n } => {
                if self.wants(a) {
                    let bv = self.value(b).values();
                    let ga = self.slot(grads, a);
                    be.gemm(rows, n, k, 1.0, g, Strides::row_major(n), &bv, Strides::row_major(k), 1.0, ga, Strides::row_major(k));
                }
                if self.wants(b) {
                    let av = self.value(a).values();
                    let gb = self.slot(grads, b);
                    be.gemm(n, rows, k, 1.0, g, Strides::transposed(n), &av, Strides::row_major(k), 1.0, gb, Strides::row_major(k));
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    let ga = self.slot(grads, a);
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.wants(b) {
                    let gb = self.slot(grads, b);
                    let blen = gb.len();
                    for chunk in g.chunks_exact(blen) {
                        gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).values();
                let bv = self.value(b).values();
                let blen = bv.len();
                if self.wants(a) {
                    let ga = self.slot(grads, a);
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * bv[i % blen];
                    }
                }
                if self.wants(b) {
                    let gb = self.slot(grads, b);
                    for (i, (gi, ai)) in g.iter().zip(av.iter()).enumerate() {
                        gb[i % blen] += gi * ai;
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if self.wants(a) {
                    let ga = self.slot(grads, a);
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y);
                }
            }
            &Op::Gelu { a } => {
                if self.wants(a) {
                    let av = self.value(a).values();
                    let ga = self.slot(grads, a);
                    for ((x, gi), xi) in ga.iter_mut().zip(g).zip(av.iter()) {
                        *x += gi * kernels::gelu_grad(*xi);
                    }
                }
            }
            &Op::Exp { a } => {
                if self.wants(a) {
                    let yv = node.value.values();
                    let ga = self.slot(grads, a);
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(yv.iter()) {
                        *x += gi * yi;
                    }
                }
            }
            &Op::Rsqrt { a } => {
                if self.wants(a) {
                    let yv = node.value.values();
                    let ga = self.slot(grads, a);
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(yv.iter()) {
                        *x += gi * -0.5 * yi * yi * yi;
                    }
                }
            }
            &Op::Softmax { a } => {
                if self.wants(a) {
                    let yv = node.value.values();
                    let width = *node.value.shape().last().unwrap_or(&1);
                    let ga = self.slot(grads, a);
                    for ((gx, gy), y) in ga
                        .chunks_exact_mut(width)
                        .zip(g.chunks_exact(width))
                        .zip(yv.chunks_exact(width))
                    {
                        let dot: f32 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                        for j in 0..width {
                            gx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            &Op::Sum { a } => {
                if self.wants(a) {
                    let ga = self.slot(grads, a);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let xv = self.value(x).values();
                let gv = self.value(gain).values();
                let d = gv.len();
                if self.wants(x) {
                    let gx = self.slot(grads, x);
                    for (((gx_row, g_row), x_row), &r) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xv.chunks_exact(d))
                        .zip(inv_rms)
                    {
                        let s: f32 = (0..d).map(|j| gv[j] * g_row[j] * x_row[j]).sum();
                        let coeff = r * r * r * s / d as f32;
                        for j in 0..d {
                            gx_row[j] += r * gv[j] * g_row[j] - coeff * x_row[j];
                        }
                    }
                }
                if self.wants(gain) {
                    let gg = self.slot(grads, gain);
                    for ((g_row, x_row), &r) in g.chunks_exact(d).zip(xv.chunks_exact(d)).zip(inv_rms) {
                        for j in 0..d {
                            gg[j] += g_row[j] * x_row[j] * r;
                        }
                    }
                }
            }
            Op::Rope { x, table, start, .. } => {
                if self.wants(*x) {
                    let shape = node.value.shape();
                    let (seq, width) = (shape[1], shape[2]);
                    let dh = table.d_head();
                    let mut rotated = g.to_vec();
                    for (r, row) in rotated.chunks_exact_mut(width).enumerate() {
                        let (c, s) = table.angles(start + r % seq);
                        for head in row.chunks_exact_mut(dh) {
                            kernels::rotate_pairs_inverse(head, c, s);
                        }
                    }
                    let gx = self.slot(grads, *x);
                    gx.iter_mut().zip(&rotated).for_each(|(a, b)| *a += b);
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let width = self.value(*table).shape()[1];
                    let gt = self.slot(grads, *table);
                    for (row, &id) in g.chunks_exact(width).zip(ids) {
                        let start = id as usize * width;
                        gt[start..start + width]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::CausalAttention { q, k, v, heads, lse } => {
                self.attention_backward(node, g, grads, (*q, *k, *v), *heads, lse);
            }
            Op::CrossEntropy { logits, targets } => {
                if self.wants(*logits) {
                    let lv = self.value(*logits).values();
                    let vocab = *self.value(*logits).shape().last().expect("checked in forward");
                    let factor = g[0] / targets.len() as f32;
                    let gl = self.slot(grads, *logits);
                    for ((gl_row, row), &t) in gl.chunks_exact_mut(vocab).zip(lv.chunks_exact(vocab)).zip(targets) {
                        let mut probs = row.to_vec();
                        kernels::softmax_in_place(&mut probs);
                        probs[t as usize] -= 1.0;
                        for (a, p) in gl_row.iter_mut().zip(&probs) {
                            *a += factor * p;
                        }
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        node: &Node,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        lse: &[f32],
    ) {
        let be = self.backend.as_ref();
        let shape = node.value.shape();
        let (batch, seq, width) = (shape[0], shape[1], shape[2]);
        let dh = width / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let qv = self.value(q).values().into_owned();
        let kv = self.value(k).values().into_owned();
        let vv = self.value(v).values().into_owned();
        let (want_q, want_k, want_v) = (self.wants(q), self.wants(k), self.wants(v));
        let mut gq = want_q.then(|| vec![0.0; qv.len()]);
        let mut gk = want_k.then(|| vec![0.0; kv.len()]);
        let mut gv = want_v.then(|| vec![0.0; vv.len()]);
        let rm = Strides::row_major;
        let mut probs = vec![0.0; seq * seq];
        let mut dprobs = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * width + h * dh;
                be.gemm(seq, dh, seq, scale, &qv[off..], rm(width), &kv[off..], Strides::transposed(width), 0.0, &mut probs, rm(seq));
                for i in 0..seq {
                    let l = lse[(b * heads + h) * seq + i];
                    let row = &mut probs[i * seq..(i + 1) * seq];
                    row[..=i].iter_mut().for_each(|s| *s = (*s - l).exp());
                    row[i + 1..].fill(0.0);
                }
                if let Some(gv) = gv.as_mut() {
                    be.gemm(seq, seq, dh, 1.0, &probs, Strides::transposed(seq), &g[off..], rm(width), 1.0, &mut gv[off..], rm(width));
                }
                if !(want_q || want_k) {
                    continue;
                }
                be.gemm(seq, dh, seq, 1.0, &g[off..], rm(width), &vv[off..], Strides::transposed(width), 0.0, &mut dprobs, rm(seq));
                for i in 0..seq {
                    let p = &probs[i * seq..(i + 1) * seq];
                    let dp = &mut dprobs[i * seq..(i + 1) * seq];
                    let dot: f32 = p[..=i].iter().zip(&dp[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        dp[j] = p[j] * (dp[j] - dot) * scale;
                    }
                    dp[i + 1..].fill(0.0);
                }
                if let Some(gq) = gq.as_mut() {
                    be.gemm(seq, seq, dh, 1.0, &dprobs, rm(seq), &kv[off..], rm(width), 1.0, &mut gq[off..], rm(width));
                }
                if let Some(gk) = gk.as_mut() {
                    be.gemm(seq, seq, dh, 1.0, &dprobs, Strides::transposed(seq), &qv[off..], rm(width), 1.0, &mut gk[off..], rm(width));
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(buf) = buf {
                let slot = self.slot(grads, var);
                slot.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            }
        }
    }
}

#[cfg(test)]
#[path = "tape_tests.rs"]
mod tests;
