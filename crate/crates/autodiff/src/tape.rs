//! Dynamic computation tape.
//!
//! Every forward op appends a node holding its output value. When at least
//! one input is gradient-tracked the node also remembers how it was produced,
//! and [`Tape::backward`] walks the nodes in reverse insertion order. Inputs
//! always precede their consumers, so reverse order is a valid reverse
//! topological order.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutodiffError, Result};
use crate::kernels;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Log-probabilities are floored here inside divergence terms.
pub const LOG_PROB_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Sum(usize),
    Mean(usize),
    Softmax(usize, f64),
    LogSoftmax(usize, f64),
    Nll(usize, Vec<usize>),
    Kl(usize, usize),
    KlLogits(usize, usize, f64),
    L2(usize, usize),
    Gather(usize, Vec<usize>),
    Clamp(usize, f64, f64),
    Minimum(usize, usize),
    Reshape(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Operation selector for [`Tape::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Affine,
    Relu,
    Tanh,
    Concat,
    Slice { start: usize, end: usize },
    Sum,
    Mean,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Drops all nodes. Handles issued before the call become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Gradient-tracked leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.push(value, Op::Leaf, tracked)
    }

    pub fn try_value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(var)?].value)
    }

    /// Value of a node. Panics on a stale handle.
    pub fn value(&self, var: Var) -> &Tensor {
        self.try_value(var).expect("stale Var")
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.check(var).map(|i| self.nodes[i].tracked).unwrap_or(false)
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(AutodiffError::StaleVar);
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn tracked_any(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].tracked)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn elementwise2(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(name, ia, ib)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let tracked = self.tracked_any(&[ia, ib]);
        Ok(self.push(value, op(ia, ib), tracked))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(value, op(ia), tracked))
    }

    /// Generic dispatch over the structural op set.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize, name: &'static str| -> Result<()> {
            if inputs.len() != n {
                return Err(AutodiffError::InvalidArgument {
                    op: name,
                    message: format!("expected {n} inputs, got {}", inputs.len()),
                });
            }
            Ok(())
        };
        match kind {
            OpKind::Add => arity(2, "add").and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2, "sub").and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2, "mul").and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Scale(c) => arity(1, "scale").and_then(|_| self.scale(inputs[0], c)),
            OpKind::MatMul => arity(2, "matmul").and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Affine => {
                arity(3, "affine").and_then(|_| self.affine(inputs[0], inputs[1], inputs[2]))
            }
            OpKind::Relu => arity(1, "relu").and_then(|_| self.relu(inputs[0])),
            OpKind::Tanh => arity(1, "tanh").and_then(|_| self.tanh(inputs[0])),
            OpKind::Concat => self.concat(inputs),
            OpKind::Slice { start, end } => {
                arity(1, "slice").and_then(|_| self.slice(inputs[0], start, end))
            }
            OpKind::Sum => arity(1, "sum").and_then(|_| self.sum(inputs[0])),
            OpKind::Mean => arity(1, "mean").and_then(|_| self.mean(inputs[0])),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("minimum", a, b, f64::min, Op::Minimum)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let value = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect());
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(value, Op::Scale(ia, c), tracked))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(AutodiffError::InvalidArgument {
                op: "clamp",
                message: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let data = va.data().iter().map(|x| x.clamp(lo, hi)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(value, Op::Clamp(ia, lo, hi), tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.nodes[ia].value.data(), self.nodes[ib].value.data(), m, k, n, &mut out);
        let tracked = self.tracked_any(&[ia, ib]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(ia, ib), tracked))
    }

    /// `x · W + b` for `x` of shape `[in]` or `[rows, in]`, `W` `[in, out]`, `b` `[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (sx, sw, sb) = (
            self.nodes[ix].value.shape(),
            self.nodes[iw].value.shape(),
            self.nodes[ib].value.shape(),
        );
        if sw.len() != 2 || sx.is_empty() || sx.len() > 2 || *sx.last().unwrap() != sw[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "affine",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        if sb != [sw[1]] {
            return Err(AutodiffError::ShapeMismatch {
                op: "affine(bias)",
                left: sw.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (rows, k, n) = (self.nodes[ix].value.rows_cols().0, sw[0], sw[1]);
        let out_shape = if sx.len() == 1 { vec![n] } else { vec![rows, n] };
        let bias = self.nodes[ib].value.data();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        kernels::matmul(self.nodes[ix].value.data(), self.nodes[iw].value.data(), rows, k, n, &mut out);
        let tracked = self.tracked_any(&[ix, iw, ib]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Affine(ix, iw, ib), tracked))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let Some(&first) = idx.first() else {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                message: "no inputs".into(),
            });
        };
        let s0 = self.nodes[first].value.shape().to_vec();
        if s0.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                left: s0,
                right: vec![],
            });
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != s0.len() || s[1..] != s0[1..] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    left: s0,
                    right: s.to_vec(),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let mut shape = s0;
        shape[0] = lead;
        let tracked = self.tracked_any(&idx);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(idx), tracked))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].value.shape().to_vec();
        if shape.is_empty() || start >= end || end > shape[0] {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                message: format!("range {start}..{end} invalid for shape {shape:?}"),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.nodes[ia].value.data()[start * inner..end * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Slice(ia, start), tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.check(a)?;
        let value = Tensor::new(shape, self.nodes[ia].value.data().to_vec()).map_err(|_| {
            AutodiffError::InvalidArgument {
                op: "reshape",
                message: format!("cannot reshape {:?}", self.nodes[ia].value.shape()),
            }
        })?;
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(value, Op::Reshape(ia), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s: f64 = self.nodes[ia].value.data().iter().sum();
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia), tracked))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(Tensor::scalar(m), Op::Mean(ia), tracked))
    }

    /// Value-identical copy that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let value = self.try_value(a)?.clone();
        Ok(self.constant(value))
    }

    /// Row-wise `softmax(logits / temperature)`.
    pub fn softmax_temp(&mut self, logits: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let ia = self.check(logits)?;
        let v = &self.nodes[ia].value;
        let (rows, cols) = v.rows_cols();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            kernels::softmax_row(v.row(r), temperature, &mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(value, Op::Softmax(ia, temperature), tracked))
    }

    /// Row-wise `log_softmax(logits / temperature)`.
    pub fn log_softmax_temp(&mut self, logits: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let ia = self.check(logits)?;
        let v = &self.nodes[ia].value;
        let (rows, cols) = v.rows_cols();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            kernels::log_softmax_row(v.row(r), temperature, &mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(value, Op::LogSoftmax(ia, temperature), tracked))
    }

    /// Mean negative log-likelihood of the target column of each row.
    pub fn nll_loss(&mut self, log_probs: Var, targets: &[usize]) -> Result<Var> {
        let ia = self.check(log_probs)?;
        let v = &self.nodes[ia].value;
        let (rows, cols) = v.rows_cols();
        if targets.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "nll_loss",
                left: v.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(AutodiffError::TargetOutOfRange {
                    index: t,
                    classes: cols,
                });
            }
            total -= v.data()[r * cols + t];
        }
        let value = Tensor::scalar(total / rows as f64);
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(value, Op::Nll(ia, targets.to_vec()), tracked))
    }

    /// Row-averaged `KL(p || q)` from log-probabilities, with `0 · log 0 = 0`.
    pub fn kl_divergence(&mut self, log_p: Var, log_q: Var) -> Result<Var> {
        let (ip, iq) = (self.check(log_p)?, self.check(log_q)?);
        self.same_shape("kl_divergence", ip, iq)?;
        let (vp, vq) = (&self.nodes[ip].value, &self.nodes[iq].value);
        let (rows, _) = vp.rows_cols();
        let total: f64 = vp
            .data()
            .iter()
            .zip(vq.data())
            .map(|(&lp, &lq)| kernels::kl_term(lp, lq))
            .sum();
        let value = Tensor::scalar(total / rows as f64);
        let tracked = self.tracked_any(&[ip, iq]);
        Ok(self.push(value, Op::Kl(ip, iq), tracked))
    }

    /// Row-averaged `KL(softmax(a / t) || softmax(b / t))` computed directly
    /// from logits. Cheaper than composing log-softmax and
    /// [`Tape::kl_divergence`], and its gradients are exactly zero when the
    /// two logit rows are equal.
    pub fn kl_logits(&mut self, a: Var, b: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("kl_logits", ia, ib)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (rows, cols) = va.rows_cols();
        let mut la = vec![0.0; cols];
        let mut lb = vec![0.0; cols];
        let mut total = 0.0;
        for r in 0..rows {
            kernels::log_softmax_row(va.row(r), temperature, &mut la);
            kernels::log_softmax_row(vb.row(r), temperature, &mut lb);
            total += kl_row(&la, &lb);
        }
        let value = Tensor::scalar(total / rows as f64);
        let tracked = self.tracked_any(&[ia, ib]);
        Ok(self.push(value, Op::KlLogits(ia, ib, temperature), tracked))
    }

    /// Row-averaged squared Euclidean distance.
    pub fn l2_distance(&mut self, p: Var, q: Var) -> Result<Var> {
        let (ip, iq) = (self.check(p)?, self.check(q)?);
        self.same_shape("l2_distance", ip, iq)?;
        let (vp, vq) = (&self.nodes[ip].value, &self.nodes[iq].value);
        let (rows, _) = vp.rows_cols();
        let total: f64 = vp.data().iter().zip(vq.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(total / rows as f64);
        let tracked = self.tracked_any(&[ip, iq]);
        Ok(self.push(value, Op::L2(ip, iq), tracked))
    }

    /// Picks column `indices[r]` from row `r`; output has shape `[rows]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let (rows, cols) = v.rows_cols();
        if indices.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                left: v.shape().to_vec(),
                right: vec![indices.len()],
            });
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &c) in indices.iter().enumerate() {
            if c >= cols {
                return Err(AutodiffError::TargetOutOfRange {
                    index: c,
                    classes: cols,
                });
            }
            out.push(v.data()[r * cols + c]);
        }
        let tracked = self.nodes[ia].tracked;
        Ok(self.push(Tensor::from_parts(vec![rows], out), Op::Gather(ia, indices.to_vec()), tracked))
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// The result holds an entry for every tracked leaf on the tape; leaves the
    /// loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        let lv = &self.nodes[root].value;
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        let mut leaves: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root].tracked {
            grads[root] = Some(vec![1.0]);
        }
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => leaves[i] = Some(g),
                op => self.propagate(op, i, &g, &mut grads),
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.tracked && matches!(node.op, Op::Leaf) && leaves[i].is_none() {
                leaves[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], i: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[i].tracked {
            return None;
        }
        let len = self.nodes[i].value.len();
        Some(grads[i].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, op: &Op, out: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| self.nodes[i].value.data();
        match *op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                for (i, sign) in [(a, 1.0), (b, 1.0)] {
                    if let Some(s) = self.slot(grads, i) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += sign * g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(grads, b) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(s) = self.slot(grads, a) {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(val(b)) {
                        *s += g * y;
                    }
                }
                if let Some(s) = self.slot(grads, b) {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(val(a)) {
                        *s += g * x;
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(a), val(b));
                if let Some(s) = self.slot(grads, a) {
                    for i in 0..g.len() {
                        if va[i] <= vb[i] {
                            s[i] += g[i];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, b) {
                    for i in 0..g.len() {
                        if va[i] > vb[i] {
                            s[i] += g[i];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = self.slot(grads, a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
                }
            }
            Op::Relu(a) => {
                let x = val(a);
                if let Some(s) = self.slot(grads, a) {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let y = val(out);
                if let Some(s) = self.slot(grads, a) {
                    for i in 0..g.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Exp(a) => {
                let y = val(out);
                if let Some(s) = self.slot(grads, a) {
                    for i in 0..g.len() {
                        s[i] += g[i] * y[i];
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(a);
                if let Some(s) = self.slot(grads, a) {
                    for i in 0..g.len() {
                        if x[i] >= lo && x[i] <= hi {
                            s[i] += g[i];
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a].tracked {
                    let bv = val(b);
                    let s = self.slot(grads, a).unwrap();
                    kernels::matmul_grad_left(g, bv, m, k, n, s);
                }
                if self.nodes[b].tracked {
                    let av = val(a);
                    let s = self.slot(grads, b).unwrap();
                    kernels::matmul_grad_right(av, g, m, k, n, s);
                }
            }
            Op::Affine(x, w, b) => {
                let (rows, k) = self.nodes[x].value.rows_cols();
                let n = self.nodes[w].value.shape()[1];
                if self.nodes[x].tracked {
                    let wv = val(w);
                    let s = self.slot(grads, x).unwrap();
                    kernels::matmul_grad_left(g, wv, rows, k, n, s);
                }
                if self.nodes[w].tracked {
                    let xv = val(x);
                    let s = self.slot(grads, w).unwrap();
                    kernels::matmul_grad_right(xv, g, rows, k, n, s);
                }
                if let Some(s) = self.slot(grads, b) {
                    for row in g.chunks_exact(n) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if let Some(s) = self.slot(grads, p) {
                        s.iter_mut().zip(&g[offset..offset + len]).for_each(|(s, g)| *s += g);
                    }
                    offset += len;
                }
            }
            Op::Slice(a, start) => {
                let shape = self.nodes[a].value.shape();
                let inner: usize = shape[1..].iter().product();
                if let Some(s) = self.slot(grads, a) {
                    let base = start * inner;
                    s[base..base + g.len()].iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, a) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(s) = self.slot(grads, a) {
                    let c = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|s| *s += c);
                }
            }
            Op::Softmax(a, t) => {
                let y = val(out);
                let (_, cols) = self.nodes[out].value.rows_cols();
                if let Some(s) = self.slot(grads, a) {
                    for ((srow, grow), yrow) in
                        s.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(y.chunks_exact(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for c in 0..cols {
                            srow[c] += yrow[c] * (grow[c] - dot) / t;
                        }
                    }
                }
            }
            Op::LogSoftmax(a, t) => {
                let y = val(out);
                let (_, cols) = self.nodes[out].value.rows_cols();
                if let Some(s) = self.slot(grads, a) {
                    for ((srow, grow), yrow) in
                        s.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(y.chunks_exact(cols))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for c in 0..cols {
                            srow[c] += (grow[c] - yrow[c].exp() * gsum) / t;
                        }
                    }
                }
            }
            Op::Nll(a, ref targets) => {
                let (rows, cols) = self.nodes[a].value.rows_cols();
                if let Some(s) = self.slot(grads, a) {
                    let c = g[0] / rows as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        s[r * cols + t] -= c;
                    }
                }
            }
            Op::Kl(p, q) => {
                let (rows, _) = self.nodes[p].value.rows_cols();
                let c = g[0] / rows as f64;
                let (lp, lq) = (val(p), val(q));
                if let Some(s) = self.slot(grads, p) {
                    for i in 0..s.len() {
                        s[i] += c * kernels::kl_term_grad_p(lp[i], lq[i]);
                    }
                }
                if let Some(s) = self.slot(grads, q) {
                    for i in 0..s.len() {
                        s[i] += c * kernels::kl_term_grad_q(lp[i], lq[i]);
                    }
                }
            }
            // KL(p || p) is identically zero.
            Op::KlLogits(a, b, _) if a == b => {}
            Op::KlLogits(a, b, t) => {
                let (rows, cols) = self.nodes[a].value.rows_cols();
                let c = g[0] / rows as f64;
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                let (mut la, mut lb) = (vec![0.0; cols], vec![0.0; cols]);
                let mut ga = self.slot(grads, a).map(std::mem::take);
                let mut gb = self.slot(grads, b).map(std::mem::take);
                for r in 0..rows {
                    kernels::log_softmax_row(va.row(r), t, &mut la);
                    kernels::log_softmax_row(vb.row(r), t, &mut lb);
                    let kl = kl_row(&la, &lb);
                    for k in 0..cols {
                        let p = la[k].exp();
                        if let Some(s) = ga.as_mut() {
                            s[r * cols + k] += c * p * ((la[k] - lb[k]) - kl) / t;
                        }
                        if let Some(s) = gb.as_mut() {
                            s[r * cols + k] += c * (lb[k].exp() - p) / t;
                        }
                    }
                }
                if let Some(s) = ga {
                    grads[a] = Some(s);
                }
                if let Some(s) = gb {
                    grads[b] = Some(s);
                }
            }
            Op::L2(p, q) => {
                let (rows, _) = self.nodes[p].value.rows_cols();
                let c = 2.0 * g[0] / rows as f64;
                let (vp, vq) = (val(p), val(q));
                if let Some(s) = self.slot(grads, p) {
                    for i in 0..s.len() {
                        s[i] += c * (vp[i] - vq[i]);
                    }
                }
                if let Some(s) = self.slot(grads, q) {
                    for i in 0..s.len() {
                        s[i] -= c * (vp[i] - vq[i]);
                    }
                }
            }
            Op::Gather(a, ref indices) => {
                let (_, cols) = self.nodes[a].value.rows_cols();
                if let Some(s) = self.slot(grads, a) {
                    for (r, &c) in indices.iter().enumerate() {
                        s[r * cols + c] += g[r];
                    }
                }
            }
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(AutodiffError::NonPositiveTemperature(t))
    }
}

/// Gradients of tracked leaves produced by one [`Tape::backward`] call.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    leaves: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.leaves.get(var.index)?.as_deref()
    }

    /// Number of leaves with an entry.
    pub fn len(&self) -> usize {
        self.leaves.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `Σ p (log p - log q)` over one row of log-probabilities.
fn kl_row(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .map(|(&a, &b)| {
            let p = a.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (a - b)
            }
        })
        .sum()
}
