//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]; a node's inputs always
//! precede it, so the node list is a topological order. [`Tape::backward`]
//! walks the list once in reverse and accumulates gradients into the leaves
//! that were registered with `requires_grad`.
//!
//! ```
//! use coral_core::tape::Tape;
//! use coral_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[6.0]);
//! ```
//!
//! Repeated calls to `backward` add into leaf gradients; call
//! [`Tape::zero_grads`] to reset them.

use std::borrow::Cow;

use rand::Rng;

use crate::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node<'w> {
    value: Cow<'w, Tensor>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Recorded computation graph. Parameters can be borrowed for the lifetime
/// `'w` so a forward pass never copies model weights.
#[derive(Default)]
pub struct Tape<'w> {
    nodes: Vec<Node<'w>>,
}

impl<'w> Tape<'w> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// Registers a borrowed leaf.
    pub fn leaf_ref(&mut self, value: &'w Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    fn push_leaf(&mut self, value: Cow<'w, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Non-differentiable results keep their value only.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        self.nodes[v.0].value.dims2(op)
    }

    // ---------------------------------------------------------------- ops

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, &[a, b], Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, &[a, b], Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, &[a, b], Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, &[a, b], Op::Mul(a, b)))
    }

    /// Adds a rank-1 bias over the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, &[x, bias], Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(value.shape().to_vec(), data).expect("shape preserved");
        self.push(t, &[x], Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(value.shape().to_vec(), data).expect("shape preserved");
        self.push(t, &[x], Op::Gelu(x))
    }

    /// Row-wise softmax of a matrix, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`; later
    /// columns get probability exactly zero.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let width = if causal { (i + 1).min(n) } else { n };
            softmax_into(&src[i * n..i * n + width], &mut out[i * n..i * n + width]);
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, &[x], Op::Softmax { x }))
    }

    /// Normalizes each vector along the last dimension, then applies
    /// `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::Invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.shape(bias) != [d] {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// taken over the rows where `mask` is true.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy_masked")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_masked",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&t) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy_masked",
                index: t,
                bound: vocab,
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::DegenerateMask);
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for i in (0..rows).filter(|&i| mask[i]) {
            let row = &src[i * vocab..(i + 1) * vocab];
            total -= log_softmax_at(row, targets[i]);
            softmax_into(row, &mut probs[i * vocab..(i + 1) * vocab]);
        }
        let loss = Tensor::scalar(total / count as f64);
        Ok(self.push(
            loss,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Selects rows of `table` by index: the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, d) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(TensorError::Invalid("gather_rows needs at least one index".into()));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            &[table],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if width == 0 || start + width > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + width,
                bound: n,
            });
        }
        let src = self.value(x).data();
        let out = (0..m)
            .flat_map(|i| src[i * n + start..i * n + start + width].iter().copied())
            .collect();
        Ok(self.push(Tensor::new(vec![m, width], out)?, &[x], Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(vec![m, total], out)?, parts, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::new(vec![rows, n], out)?, parts, Op::ConcatRows(parts.to_vec())))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let value = self.value(x);
        let mask: Vec<f64> = (0..value.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = value.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(value.shape().to_vec(), data).expect("shape preserved");
        self.push(t, &[x], Op::Dropout { x, mask })
    }

    // ----------------------------------------------------------- backward

    /// Propagates `∂loss/∂·` to every leaf registered with `requires_grad`,
    /// adding into any gradient already present.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul").expect("checked in forward");
                let n = self.value(*b).last_dim();
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    matmul_nt_acc(g, self.value(*b).data(), self.slot(grads, *a), m, n, k);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    matmul_tn_acc(self.value(*a).data(), g, self.slot(grads, *b), m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul_nt").expect("checked in forward");
                let n = self.value(*b).shape()[0];
                if self.requires_grad(*a) {
                    // dA = dC · B
                    matmul_acc(g, self.value(*b).data(), self.slot(grads, *a), m, n, k);
                }
                if self.requires_grad(*b) {
                    // dB = dCᵀ · A
                    matmul_tn_acc(g, self.value(*a).data(), self.slot(grads, *b), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        add_into(self.slot(grads, v), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let other = self.value(*b).data();
                    let slot = self.slot(grads, *a);
                    for ((s, gv), o) in slot.iter_mut().zip(g).zip(other) {
                        *s += gv * o;
                    }
                }
                if self.requires_grad(*b) {
                    let other = self.value(*a).data();
                    let slot = self.slot(grads, *b);
                    for ((s, gv), o) in slot.iter_mut().zip(g).zip(other) {
                        *s += gv * o;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.requires_grad(*x) {
                    add_into(self.slot(grads, *x), g);
                }
                if self.requires_grad(*bias) {
                    let slot = self.slot(grads, *bias);
                    let d = slot.len();
                    for row in g.chunks(d) {
                        add_into(slot, row);
                    }
                }
            }
            Op::Scale(x, factor) => {
                let slot = self.slot(grads, *x);
                for (s, gv) in slot.iter_mut().zip(g) {
                    *s += gv * factor;
                }
            }
            Op::Sum(x) => {
                let slot = self.slot(grads, *x);
                slot.iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Gelu(x) => {
                let input = self.value(*x).data();
                let slot = self.slot(grads, *x);
                for ((s, gv), &v) in slot.iter_mut().zip(g).zip(input) {
                    *s += gv * gelu_grad(v);
                }
            }
            Op::Softmax { x } => {
                let n = node.value.last_dim();
                let slot = self.slot(grads, *x);
                for ((y, dy), dx) in out.chunks(n).zip(g.chunks(n)).zip(slot.chunks_mut(n)) {
                    let inner = dot(y, dy);
                    for j in 0..n {
                        dx[j] += y[j] * (dy[j] - inner);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                if self.requires_grad(*gain) {
                    let slot = self.slot(grads, *gain);
                    for (dy, h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            slot[j] += dy[j] * h[j];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let slot = self.slot(grads, *bias);
                    for dy in g.chunks(d) {
                        add_into(slot, dy);
                    }
                }
                if self.requires_grad(*x) {
                    let gvals = self.value(*gain).data();
                    let slot = self.slot(grads, *x);
                    let mut dxhat = vec![0.0; d];
                    for (r, ((dy, h), dx)) in
                        g.chunks(d).zip(xhat.chunks(d)).zip(slot.chunks_mut(d)).enumerate()
                    {
                        for j in 0..d {
                            dxhat[j] = dy[j] * gvals[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dot(&dxhat, h) / d as f64;
                        for j in 0..d {
                            dx[j] += inv_std[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).last_dim();
                let scale = g[0] / *count as f64;
                let slot = self.slot(grads, *logits);
                for i in (0..mask.len()).filter(|&i| mask[i]) {
                    let p = &probs[i * vocab..(i + 1) * vocab];
                    let dx = &mut slot[i * vocab..(i + 1) * vocab];
                    for j in 0..vocab {
                        dx[j] += scale * p[j];
                    }
                    dx[targets[i]] -= scale;
                }
            }
            Op::Gather { table, ids } => {
                let d = node.value.last_dim();
                let slot = self.slot(grads, *table);
                for (row, &id) in g.chunks(d).zip(ids) {
                    add_into(&mut slot[id * d..(id + 1) * d], row);
                }
            }
            Op::SliceCols { x, start } => {
                let width = node.value.last_dim();
                let n = self.value(*x).last_dim();
                let slot = self.slot(grads, *x);
                for (i, row) in g.chunks(width).enumerate() {
                    add_into(&mut slot[i * n + start..i * n + start + width], row);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.requires_grad(p) {
                        let slot = self.slot(grads, p);
                        for (i, dst) in slot.chunks_mut(w).enumerate() {
                            add_into(dst, &g[i * total + offset..i * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.requires_grad(p) {
                        add_into(self.slot(grads, p), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Dropout { x, mask } => {
                let slot = self.slot(grads, *x);
                for ((s, gv), m) in slot.iter_mut().zip(g).zip(mask) {
                    *s += gv * m;
                }
            }
        }
    }

    /// Mutable gradient buffer for `v`, allocated on first use.
    #[allow(clippy::mut_from_ref)]
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Max-subtracted softmax of `src` into `dst`.
pub(crate) fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    dst.iter_mut().for_each(|d| *d /= total);
}

/// `log softmax(row)[index]` via log-sum-exp.
pub(crate) fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[index] - max - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_scalar_and_general() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(mat(&[&[1.0, 0.0], &[0.0, 1.0]]), false);
        let m = tape.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]]), false);
        let r = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.leaf(mat(&[&[2.0]]), false);
        let b = tape.leaf(mat(&[&[3.0]]), false);
        let r = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(r).data(), &[6.0]);

        let n = tape.leaf(mat(&[&[5.0, 6.0], &[7.0, 8.0]]), false);
        let r = tape.matmul(m, n).unwrap();
        assert_eq!(tape.value(r).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(&[&[0.0, 0.0, 0.0]]), false);
        let y = tape.softmax_rows(x).unwrap();
        for &p in tape.value(y).data() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }

        let x = tape.leaf(mat(&[&[1000.0, 1000.0]]), false);
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.leaf(mat(&[&[0.0, 3f64.ln()]]), false);
        let y = tape.softmax_rows(x).unwrap();
        assert_abs_diff_eq!(tape.value(y).data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(y).data()[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn causal_softmax_zeroes_future_columns() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]]), false);
        let y = tape.causal_softmax_rows(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(d[5], 0.0);
        assert_abs_diff_eq!(d[3] + d[4], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d[6], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let ones = tape.leaf(Tensor::full(&[2], 1.0), false);
        let zeros = tape.leaf(Tensor::zeros(&[2]), false);

        let c = tape.leaf(Tensor::full(&[1, 2], 4.0), false);
        let y = tape.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let x = tape.leaf(mat(&[&[1.0, 3.0]]), false);
        let y = tape.layer_norm(x, ones, zeros, 1e-12).unwrap();
        assert_abs_diff_eq!(tape.value(y).data()[0], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(tape.value(y).data()[1], 1.0, epsilon = 1e-9);

        let twos = tape.leaf(Tensor::full(&[2], 2.0), false);
        let fives = tape.leaf(Tensor::full(&[2], 5.0), false);
        let y = tape.layer_norm(x, twos, fives, 1e-12).unwrap();
        assert_abs_diff_eq!(tape.value(y).data()[0], 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(tape.value(y).data()[1], 7.0, epsilon = 1e-9);

        assert!(tape.layer_norm(x, ones, zeros, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        // Perfect prediction.
        let x = tape.leaf(mat(&[&[1000.0, 0.0], &[0.0, 1000.0]]), false);
        let l = tape.cross_entropy_masked(x, &[0, 1], &[true, true]).unwrap();
        assert_eq!(tape.value(l).item(), Some(0.0));

        // Uniform over 4.
        let x = tape.leaf(Tensor::zeros(&[3, 4]), false);
        let l = tape.cross_entropy_masked(x, &[0, 3, 2], &[true, true, true]).unwrap();
        assert_abs_diff_eq!(tape.value(l).item().unwrap(), 4f64.ln(), epsilon = 1e-15);

        // Hand softmax: row 0 → p(1) = 3/4, row 1 → p(0) = 1/2.
        let x = tape.leaf(mat(&[&[0.0, 3f64.ln()], &[0.0, 0.0]]), false);
        let l = tape.cross_entropy_masked(x, &[1, 0], &[true, true]).unwrap();
        let expected = -(0.75f64.ln() + 0.5f64.ln()) / 2.0;
        assert_abs_diff_eq!(tape.value(l).item().unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_empty_mask_and_bad_targets() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]), false);
        assert_eq!(
            tape.cross_entropy_masked(x, &[0, 1], &[false, false]).unwrap_err(),
            TensorError::DegenerateMask
        );
        assert!(matches!(
            tape.cross_entropy_masked(x, &[0, 3], &[true, true]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
        // Out-of-range targets at masked-out positions are never read.
        assert!(tape.cross_entropy_masked(x, &[0, 99], &[true, false]).is_ok());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3], 0.7), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        let y = tape.scale(x, 2.0);
        assert_eq!(tape.backward(y).unwrap_err(), TensorError::NonScalarLoss(vec![2, 2]));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constants_are_not_recorded_for_backward() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0), false);
        let b = tape.leaf(Tensor::scalar(5.0), true);
        let c = tape.mul(a, a).unwrap();
        assert!(!tape.requires_grad(c));
        let d = tape.mul(c, b).unwrap();
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[4.0]);
        assert!(tape.grad(a).is_none());
    }

    #[test]
    fn add_bias_requires_matching_last_dim() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        assert!(tape.add_bias(x, b).is_err());
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = rand::rng();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 2], 1.5), true);
        assert_eq!(tape.dropout(x, 0.0, &mut rng), x);
    }
}
