//! Reverse-mode autodiff over a fixed set of tensor ops.
//!
//! A [`Graph`] is a tape: every op evaluates eagerly, appends a node holding
//! its value, and records what the backward pass needs. [`Graph::backward`]
//! walks the tape in reverse from a scalar and returns [`Grads`] for every
//! node that depends on a parameter leaf.

use std::ops::Range;
use std::sync::Arc;

use super::tensor::{gemm, MatRef, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Per-token rotation angles for the pair-rotation op, shared by all heads.
///
/// Pair `p` of every head covers the adjacent channels `2p, 2p + 1`.
#[derive(Clone, Debug)]
pub struct PairRotation {
    tokens: usize,
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl PairRotation {
    /// `angles` is row-major `tokens × pairs`.
    pub fn from_angles(tokens: usize, pairs: usize, angles: &[f64]) -> Result<Self> {
        if angles.len() != tokens * pairs {
            return Err(Error::shape(
                "pair_rotation",
                format!(
                    "{} angles for {tokens} tokens × {pairs} pairs",
                    angles.len()
                ),
            ));
        }
        Ok(Self {
            tokens,
            pairs,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    /// Rotates `x` (`tokens × heads·2·pairs`) in place; `inverse` negates the angles.
    pub fn apply(&self, x: &mut [f64], inverse: bool) {
        let width = x.len() / self.tokens.max(1);
        let head_dim = 2 * self.pairs;
        for n in 0..self.tokens {
            let row = &mut x[n * width..(n + 1) * width];
            let cos = &self.cos[n * self.pairs..(n + 1) * self.pairs];
            let sin = &self.sin[n * self.pairs..(n + 1) * self.pairs];
            for head in row.chunks_exact_mut(head_dim) {
                for p in 0..self.pairs {
                    let (c, s) = (cos[p], if inverse { -sin[p] } else { sin[p] });
                    let (a, b) = (head[2 * p], head[2 * p + 1]);
                    head[2 * p] = a * c - b * s;
                    head[2 * p + 1] = a * s + b * c;
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        cols: Vec<f64>,
    },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Rotate {
        x: Var,
        rotation: Arc<PairRotation>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: Arc<[Range<usize>]>,
        heads: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::Gelu(x)
            | Op::MeanRows(x)
            | Op::Sum(x) => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { x, .. } | Op::GatherRows { x, .. } | Op::Rotate { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` does not reach the output.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push_op(out, Op::Add(a, b)))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        Ok(self.push_op(out, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(bv) {
            *o *= y;
        }
        Ok(self.push_op(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push_op(out, Op::Scale(x, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::row_major(av.data(), k),
            MatRef::row_major(bv.data(), n),
            &mut out,
            n,
            false,
        );
        let out = Tensor::new([m, n], out)?;
        Ok(self.push_op(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("transpose")?;
        let d = xv.data();
        let out = Tensor::from_fn([c, r], |i| d[(i % r) * c + i / r]);
        Ok(self.push_op(out, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape.to_vec())?;
        Ok(self.push_op(out, Op::Reshape(x)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push_op(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `x[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_split(shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = len;
        let out = Tensor::new(oshape, out)?;
        Ok(self.push_op(out, Op::Slice { x, axis, start }))
    }

    /// Rows of a matrix picked by `index`; repeats are allowed.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("gather_rows")?;
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::shape("gather_rows", format!("row {i} of {r}")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new([index.len(), c], out)?;
        Ok(self.push_op(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    pub fn softmax_lastaxis(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        Ok(self.push_op(out, Op::Softmax(x)))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension {
                op: "layernorm",
                lhs: xv.shape().to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d.max(1);
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push_op(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push_op(out, Op::Gelu(x))
    }

    /// 1D convolution over time-major input `x: [L × C_in]` with
    /// `w: [C_out × C_in × K]`, `b: [C_out]`. No padding; output length is
    /// `(L - K) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let (len, cin) = xv.dims2("conv1d")?;
        let (cout, wcin, width) = match self.shape(w) {
            &[o, c, k] => (o, c, k),
            s => {
                return Err(Error::shape(
                    "conv1d",
                    format!("weight must be rank 3, got {s:?}"),
                ))
            }
        };
        if wcin != cin || self.shape(b) != [cout] {
            return Err(Error::Dimension {
                op: "conv1d",
                lhs: xv.shape().to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if stride == 0 || width == 0 || len < width {
            return Err(Error::shape(
                "conv1d",
                format!("length {len} with width {width}, stride {stride}"),
            ));
        }
        let lo = (len - width) / stride + 1;
        let ck = cin * width;
        let mut cols = vec![0.0; lo * ck];
        for t in 0..lo {
            for c in 0..cin {
                for j in 0..width {
                    cols[t * ck + c * width + j] = xv.data()[(t * stride + j) * cin + c];
                }
            }
        }
        let mut out = vec![0.0; lo * cout];
        gemm(
            lo,
            ck,
            cout,
            MatRef::row_major(&cols, ck),
            MatRef::transposed(self.value(w).data(), ck),
            &mut out,
            cout,
            false,
        );
        let bv = self.value(b).data();
        for row in out.chunks_exact_mut(cout) {
            for (o, bi) in row.iter_mut().zip(bv) {
                *o += bi;
            }
        }
        let out = Tensor::new([lo, cout], out)?;
        Ok(self.push_op(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                cols,
            },
        ))
    }

    /// Mean over the rows of a matrix, giving `[1 × d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("mean_rows")?;
        if r == 0 {
            return Err(Error::Contract("mean over zero rows".into()));
        }
        let mut out = vec![0.0; c];
        for row in xv.data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let out = Tensor::new([1, c], out)?;
        Ok(self.push_op(out, Op::MeanRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits: [B × C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = lv.dims2("cross_entropy")?;
        if labels.len() != b || b == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_exact_mut(c).zip(labels) {
            if y >= c {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("label {y} ≥ {c} classes"),
                ));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_in_place(row);
        }
        let out = Tensor::scalar(loss / b as f64);
        Ok(self.push_op(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Rotates channel pairs of `x: [N × heads·2P]` by per-token angles.
    pub fn rotate_pairs(&mut self, x: Var, rotation: Arc<PairRotation>) -> Result<Var> {
        let xv = self.value(x);
        let (n, width) = xv.dims2("rotate_pairs")?;
        let head_dim = 2 * rotation.pairs();
        if n != rotation.tokens() {
            return Err(Error::Alignment(format!(
                "{} rotation rows for {n} tokens",
                rotation.tokens()
            )));
        }
        if head_dim == 0 || width % head_dim != 0 {
            return Err(Error::shape(
                "rotate_pairs",
                format!("width {width} is not a multiple of head dim {head_dim}"),
            ));
        }
        let mut out = xv.clone();
        rotation.apply(out.data_mut(), false);
        Ok(self.push_op(out, Op::Rotate { x, rotation }))
    }

    /// Multi-head softmax attention computed independently inside each
    /// token range of `groups`; tokens never attend across ranges.
    ///
    /// `q`, `k`, `v` are `[N × D]` with heads as contiguous column blocks of
    /// width `D / heads`. Scores are scaled by `1/√(D/heads)`. The groups must
    /// be contiguous, disjoint and cover `0..N` in order.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: Arc<[Range<usize>]>,
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (n, width) = self.value(q).dims2("attention")?;
        if heads == 0 || width % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {width} not divisible by {heads} heads"),
            ));
        }
        let mut next = 0;
        for g in groups.iter() {
            if g.start != next || g.end <= g.start {
                return Err(Error::Alignment(format!(
                    "attention groups must tile 0..{n}; found {g:?} after {next}"
                )));
            }
            next = g.end;
        }
        if next != n {
            return Err(Error::Alignment(format!(
                "attention groups cover 0..{next} but the sequence has {n} tokens"
            )));
        }
        let out = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            width,
            heads,
            &groups,
        );
        let out = Tensor::new([n, width], out)?;
        Ok(self.push_op(
            out,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddBias(x, bias) => {
                acc(*x, g.clone());
                if self.needs(*bias) {
                    let d = g.last_dim();
                    let mut db = vec![0.0; d];
                    for row in g.data().chunks_exact(d) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*bias, Tensor::new([d], db)?);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for (o, y) in ga.data_mut().iter_mut().zip(bv.data()) {
                        *o *= y;
                    }
                    acc(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = g.clone();
                    for (o, y) in gb.data_mut().iter_mut().zip(av.data()) {
                        *o *= y;
                    }
                    acc(*b, gb);
                }
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2("matmul")?;
                let n = bv.shape()[1];
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::row_major(g.data(), n),
                        MatRef::transposed(bv.data(), n),
                        &mut ga,
                        k,
                        false,
                    );
                    acc(*a, Tensor::new([m, k], ga)?);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(av.data(), k),
                        MatRef::row_major(g.data(), n),
                        &mut gb,
                        n,
                        false,
                    );
                    acc(*b, Tensor::new([k, n], gb)?);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = g.dims2("transpose")?;
                let d = g.data();
                acc(*x, Tensor::from_fn([c, r], |i| d[(i % r) * c + i / r]));
            }
            Op::Reshape(x) => acc(*x, g.reshaped(self.shape(*x).to_vec())?),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let shape = self.shape(v).to_vec();
                    let len = shape[*axis];
                    if self.needs(v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        acc(v, Tensor::new(shape, part)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                acc(*x, Tensor::new(shape, gx)?);
            }
            Op::GatherRows { x, index } => {
                let shape = self.shape(*x).to_vec();
                let c = shape[1];
                let mut gx = vec![0.0; shape[0] * c];
                for (row, &i) in g.data().chunks_exact(c).zip(index) {
                    for (o, v) in gx[i * c..(i + 1) * c].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*x, Tensor::new(shape, gx)?);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut gx = g.clone();
                for (grow, yrow) in gx
                    .data_mut()
                    .chunks_exact_mut(d)
                    .zip(y.data().chunks_exact(d))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gi, yi) in grow.iter_mut().zip(yrow) {
                        *gi = yi * (*gi - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = g.last_dim();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (grow, hrow) in g.data().chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                        }
                    }
                    acc(*gamma, Tensor::new([d], dg)?);
                    acc(*beta, Tensor::new([d], db)?);
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; g.numel()];
                    let mut dh = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &g.data()[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = grow[j] * gam[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rs * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    acc(*x, Tensor::new(g.shape().to_vec(), gx)?);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (o, &xi) in gx.data_mut().iter_mut().zip(xv.data()) {
                    *o *= gelu_grad(xi);
                }
                acc(*x, gx);
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                cols,
            } => {
                let (len, cin) = self.value(*x).dims2("conv1d")?;
                let wshape = self.shape(*w).to_vec();
                let (cout, width) = (wshape[0], wshape[2]);
                let ck = cin * width;
                let lo = g.shape()[0];
                if self.needs(*b) {
                    let mut db = vec![0.0; cout];
                    for row in g.data().chunks_exact(cout) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, Tensor::new([cout], db)?);
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; cout * ck];
                    gemm(
                        cout,
                        lo,
                        ck,
                        MatRef::transposed(g.data(), cout),
                        MatRef::row_major(cols, ck),
                        &mut gw,
                        ck,
                        false,
                    );
                    acc(*w, Tensor::new(wshape, gw)?);
                }
                if self.needs(*x) {
                    let mut gcols = vec![0.0; lo * ck];
                    gemm(
                        lo,
                        cout,
                        ck,
                        MatRef::row_major(g.data(), cout),
                        MatRef::row_major(self.value(*w).data(), ck),
                        &mut gcols,
                        ck,
                        false,
                    );
                    let mut gx = vec![0.0; len * cin];
                    for t in 0..lo {
                        for c in 0..cin {
                            for j in 0..width {
                                gx[(t * stride + j) * cin + c] += gcols[t * ck + c * width + j];
                            }
                        }
                    }
                    acc(*x, Tensor::new([len, cin], gx)?);
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = self.value(*x).dims2("mean_rows")?;
                let gd = g.data();
                acc(*x, Tensor::from_fn([r, c], |i| gd[i % c] / r as f64));
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                acc(*x, Tensor::full(self.shape(*x).to_vec(), s));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let shape = self.shape(*logits).to_vec();
                let (b, c) = (shape[0], shape[1]);
                let s = g.data()[0] / b as f64;
                let mut gl = probs.clone();
                for (row, &y) in gl.chunks_exact_mut(c).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= s;
                    }
                }
                acc(*logits, Tensor::new(shape, gl)?);
            }
            Op::Rotate { x, rotation } => {
                let mut gx = g.clone();
                rotation.apply(gx.data_mut(), true);
                acc(*x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
            } => {
                let (n, width) = g.dims2("attention")?;
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    g.data(),
                    width,
                    *heads,
                    groups,
                );
                acc(*q, Tensor::new([n, width], dq)?);
                acc(*k, Tensor::new([n, width], dk)?);
                acc(*v, Tensor::new([n, width], dv)?);
            }
        }
        Ok(())
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Scaled scores for one (group, head) block, softmaxed in place.
fn group_probs(
    q: &[f64],
    k: &[f64],
    width: usize,
    head_off: usize,
    head_dim: usize,
    range: &Range<usize>,
    probs: &mut [f64],
) {
    let n = range.len();
    let off = range.start * width + head_off;
    gemm(
        n,
        head_dim,
        n,
        MatRef::with_offset(q, off, width, 1),
        MatRef::with_offset(k, off, 1, width),
        probs,
        n,
        false,
    );
    let scale = 1.0 / (head_dim as f64).sqrt();
    for row in probs.chunks_exact_mut(n) {
        for v in row.iter_mut() {
            *v *= scale;
        }
        softmax_in_place(row);
    }
}

fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    width: usize,
    heads: usize,
    groups: &[Range<usize>],
) -> Vec<f64> {
    let head_dim = width / heads;
    let mut out = vec![0.0; q.len()];
    let largest = groups.iter().map(|g| g.len()).max().unwrap_or(0);
    let mut probs = vec![0.0; largest * largest];
    for range in groups {
        let n = range.len();
        for h in 0..heads {
            let head_off = h * head_dim;
            let p = &mut probs[..n * n];
            group_probs(q, k, width, head_off, head_dim, range, p);
            let off = range.start * width + head_off;
            gemm(
                n,
                n,
                head_dim,
                MatRef::row_major(p, n),
                MatRef::with_offset(v, off, width, 1),
                &mut out[off..],
                width,
                false,
            );
        }
    }
    out
}

fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dout: &[f64],
    width: usize,
    heads: usize,
    groups: &[Range<usize>],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let (mut dq, mut dk, mut dv) = (vec![0.0; q.len()], vec![0.0; q.len()], vec![0.0; q.len()]);
    let largest = groups.iter().map(|g| g.len()).max().unwrap_or(0);
    let mut probs = vec![0.0; largest * largest];
    let mut dscore = vec![0.0; largest * largest];
    for range in groups {
        let n = range.len();
        for h in 0..heads {
            let head_off = h * head_dim;
            let off = range.start * width + head_off;
            let p = &mut probs[..n * n];
            group_probs(q, k, width, head_off, head_dim, range, p);
            let ds = &mut dscore[..n * n];
            // dV = Pᵀ dO
            gemm(
                n,
                n,
                head_dim,
                MatRef::transposed(p, n),
                MatRef::with_offset(dout, off, width, 1),
                &mut dv[off..],
                width,
                false,
            );
            // dP = dO Vᵀ
            gemm(
                n,
                head_dim,
                n,
                MatRef::with_offset(dout, off, width, 1),
                MatRef::with_offset(v, off, 1, width),
                ds,
                n,
                false,
            );
            for (drow, prow) in ds.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (d, pi) in drow.iter_mut().zip(prow) {
                    *d = scale * pi * (*d - dot);
                }
            }
            // dQ = dS K, dK = dSᵀ Q
            gemm(
                n,
                n,
                head_dim,
                MatRef::row_major(ds, n),
                MatRef::with_offset(k, off, width, 1),
                &mut dq[off..],
                width,
                false,
            );
            gemm(
                n,
                n,
                head_dim,
                MatRef::transposed(ds, n),
                MatRef::with_offset(q, off, width, 1),
                &mut dk[off..],
                width,
                false,
            );
        }
    }
    (dq, dk, dv)
}
