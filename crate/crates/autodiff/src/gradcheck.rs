//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass on untracked
//! constants, so it shares no code path with [`Tape::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Magnitude below which relative error is measured against this floor instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

fn eval_scalar<F>(leaves: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Central differences `(f(x+h) - f(x-h)) / 2h` for every leaf value.
pub fn numerical_gradients<F>(leaves: &[Tensor], build: F, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut out = Vec::with_capacity(leaves.len());
    let mut work = leaves.to_vec();
    for i in 0..leaves.len() {
        let mut g = vec![0.0; leaves[i].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let x = leaves[i].data()[j];
            work[i].data_mut()[j] = x + h;
            let up = eval_scalar(&work, &build)?;
            work[i].data_mut()[j] = x - h;
            let down = eval_scalar(&work, &build)?;
            work[i].data_mut()[j] = x;
            *gj = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares reverse-mode gradients of `build` against central differences.
pub fn check_gradients<F>(leaves: &[Tensor], build: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients_split(leaves, &build, &build, h)
}

/// Like [`check_gradients`], but differentiates `analytic` and perturbs
/// `numeric`. The two must agree in value at the unperturbed point; they may
/// differ in how stop-gradients are expressed (a detached subgraph in one,
/// a frozen constant in the other).
pub fn check_gradients_split<A, N>(leaves: &[Tensor], analytic: A, numeric: N, h: f64) -> Result<GradCheckReport>
where
    A: Fn(&mut Tape, &[Var]) -> Result<Var>,
    N: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let loss = analytic(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let numeric = numerical_gradients(leaves, numeric, h)?;
    let mut report = GradCheckReport::default();
    for (v, num) in vars.iter().zip(&numeric) {
        let ana = grads.get(*v).expect("tracked leaf has a gradient");
        for (&a, &n) in ana.iter().zip(num) {
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(a, n));
        }
    }
    Ok(report)
}

/// One instruction of a [`RandomGraph`]; operands index earlier values
/// (leaves first, then step outputs in order).
#[derive(Clone, Debug, PartialEq)]
pub enum GraphStep {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Minimum(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Clamp(usize, f64, f64),
    Concat(Vec<usize>),
    Slice(usize, usize, usize),
    Reshape(usize, Vec<usize>),
    Softmax(usize, f64),
    LogSoftmax(usize, f64),
    Detach(usize),
    Gather(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
    Nll(usize, Vec<usize>),
    Kl(usize, usize),
    KlLogits(usize, usize, f64),
    L2(usize, usize),
}

impl GraphStep {
    pub fn name(&self) -> &'static str {
        match self {
            GraphStep::Add(..) => "add",
            GraphStep::Sub(..) => "sub",
            GraphStep::Mul(..) => "mul",
            GraphStep::Minimum(..) => "minimum",
            GraphStep::Scale(..) => "scale",
            GraphStep::MatMul(..) => "matmul",
            GraphStep::Affine(..) => "affine",
            GraphStep::Relu(..) => "relu",
            GraphStep::Tanh(..) => "tanh",
            GraphStep::Exp(..) => "exp",
            GraphStep::Clamp(..) => "clamp",
            GraphStep::Concat(..) => "concat",
            GraphStep::Slice(..) => "slice",
            GraphStep::Reshape(..) => "reshape",
            GraphStep::Softmax(..) => "softmax",
            GraphStep::LogSoftmax(..) => "log_softmax",
            GraphStep::Detach(..) => "detach",
            GraphStep::Gather(..) => "gather",
            GraphStep::Sum(..) => "sum",
            GraphStep::Mean(..) => "mean",
            GraphStep::Nll(..) => "nll",
            GraphStep::Kl(..) => "kl",
            GraphStep::KlLogits(..) => "kl_logits",
            GraphStep::L2(..) => "l2",
        }
    }

    pub const ALL_NAMES: [&'static str; 24] = [
        "add", "sub", "mul", "minimum", "scale", "matmul", "affine", "relu", "tanh", "exp", "clamp",
        "concat", "slice", "reshape", "softmax", "log_softmax", "detach", "gather", "sum", "mean", "nll",
        "kl", "kl_logits", "l2",
    ];
}

/// A small random computation over tracked leaves, reduced to a scalar by a
/// fixed random projection of every intermediate value.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub leaves: Vec<Tensor>,
    pub steps: Vec<GraphStep>,
    weights: Vec<Tensor>,
    /// Outputs of `Detach` steps evaluated at the unperturbed leaves.
    frozen: Vec<Option<Tensor>>,
}

impl RandomGraph {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(2..=3);
        let cols = rng.random_range(2..=4);
        let hidden = rng.random_range(2..=3);
        let mut leaves = Vec::new();
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        let uniform = |rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            Tensor::new(shape, data).unwrap()
        };
        for shape in [vec![rows, cols], vec![rows, cols], vec![cols, hidden], vec![hidden]] {
            leaves.push(uniform(&mut rng, shape.clone(), 1.0));
            shapes.push(shape);
        }
        let mut steps = Vec::new();
        let count = rng.random_range(6..=10);
        let pick_shape = |shapes: &Vec<Vec<usize>>, rng: &mut ChaCha8Rng, pred: &dyn Fn(&[usize]) -> bool| {
            let cands: Vec<usize> = (0..shapes.len()).filter(|&i| pred(&shapes[i])).collect();
            (!cands.is_empty()).then(|| cands[rng.random_range(0..cands.len())])
        };
        let is_matrix = |s: &[usize]| s.len() == 2;
        for _ in 0..count {
            let a = pick_shape(&shapes, &mut rng, &is_matrix).expect("leaves include matrices");
            let sa = shapes[a].clone();
            let same: Vec<usize> = (0..shapes.len()).filter(|&i| shapes[i] == sa).collect();
            let b = same[rng.random_range(0..same.len())];
            let (step, shape) = match rng.random_range(0..19) {
                0 => (GraphStep::Add(a, b), sa.clone()),
                1 => (GraphStep::Sub(a, b), sa.clone()),
                2 => (GraphStep::Mul(a, b), sa.clone()),
                3 => (GraphStep::Minimum(a, b), sa.clone()),
                4 => (GraphStep::Scale(a, rng.random_range(-2.0..2.0)), sa.clone()),
                5 => {
                    match pick_shape(&shapes, &mut rng, &|s: &[usize]| s.len() == 2 && s[0] == sa[1]) {
                        Some(w) => (GraphStep::MatMul(a, w), vec![sa[0], shapes[w][1]]),
                        None => (GraphStep::Exp(a), sa.clone()),
                    }
                }
                6 => {
                    let mut wb = Vec::new();
                    for w in 0..shapes.len() {
                        if shapes[w].len() == 2 && shapes[w][0] == sa[1] {
                            let n = shapes[w][1];
                            for bias in 0..shapes.len() {
                                if shapes[bias] == [n] {
                                    wb.push((w, bias));
                                }
                            }
                        }
                    }
                    if let Some(&(w, bias)) = wb.get(rng.random_range(0..wb.len().max(1))) {
                        (GraphStep::Affine(a, w, bias), vec![sa[0], shapes[w][1]])
                    } else {
                        (GraphStep::Tanh(a), sa.clone())
                    }
                }
                7 => (GraphStep::Relu(a), sa.clone()),
                8 => (GraphStep::Tanh(a), sa.clone()),
                9 => (GraphStep::Exp(a), sa.clone()),
                10 => {
                    let lo = rng.random_range(-0.8..-0.1);
                    (GraphStep::Clamp(a, lo, lo + rng.random_range(0.3..1.2)), sa.clone())
                }
                11 => (GraphStep::Concat(vec![a, b]), vec![sa[0] * 2, sa[1]]),
                12 => {
                    let start = rng.random_range(0..sa[0]);
                    let end = rng.random_range(start + 1..=sa[0]);
                    (GraphStep::Slice(a, start, end), vec![end - start, sa[1]])
                }
                13 => (GraphStep::Reshape(a, vec![sa[1], sa[0]]), vec![sa[1], sa[0]]),
                14 => (GraphStep::Softmax(a, rng.random_range(0.5..2.0)), sa.clone()),
                15 => (GraphStep::LogSoftmax(a, rng.random_range(0.5..2.0)), sa.clone()),
                16 => (GraphStep::Detach(a), sa.clone()),
                17 => {
                    let idx = (0..sa[0]).map(|_| rng.random_range(0..sa[1])).collect();
                    (GraphStep::Gather(a, idx), vec![sa[0]])
                }
                _ => {
                    // distribution losses need log-probability / probability inputs
                    let t = rng.random_range(0.5..2.0);
                    let base = shapes.len();
                    steps.push(GraphStep::LogSoftmax(a, t));
                    shapes.push(sa.clone());
                    steps.push(GraphStep::LogSoftmax(b, rng.random_range(0.5..2.0)));
                    shapes.push(sa.clone());
                    match rng.random_range(0..4) {
                        0 => {
                            let targets = (0..sa[0]).map(|_| rng.random_range(0..sa[1])).collect();
                            (GraphStep::Nll(base, targets), vec![])
                        }
                        1 => (GraphStep::Kl(base, base + 1), vec![]),
                        2 => (GraphStep::KlLogits(a, b, t), vec![]),
                        _ => {
                            steps.push(GraphStep::Softmax(a, t));
                            shapes.push(sa.clone());
                            steps.push(GraphStep::Softmax(b, t));
                            shapes.push(sa.clone());
                            (GraphStep::L2(base + 2, base + 3), vec![])
                        }
                    }
                }
            };
            steps.push(step);
            shapes.push(shape);
            if rng.random_bool(0.15) {
                let last = shapes.len() - 1;
                let reduce = if rng.random_bool(0.5) { GraphStep::Sum(last) } else { GraphStep::Mean(last) };
                steps.push(reduce);
                shapes.push(vec![]);
            }
        }
        let weights = shapes[leaves.len()..]
            .iter()
            .map(|s| {
                if s.is_empty() {
                    Tensor::scalar(rng.random_range(-1.0..1.0))
                } else {
                    uniform(&mut rng, s.clone(), 1.0)
                }
            })
            .collect();
        let mut graph = Self {
            leaves,
            steps,
            weights,
            frozen: Vec::new(),
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = graph.leaves.iter().map(|t| tape.constant(t.clone())).collect();
        let vals = graph.replay(&mut tape, &vars, false).expect("generated graph is well-formed");
        graph.frozen = graph
            .steps
            .iter()
            .enumerate()
            .map(|(k, step)| match step {
                GraphStep::Detach(_) => Some(tape.value(vals[vars.len() + k]).clone()),
                _ => None,
            })
            .collect();
        graph
    }

    /// Gradient check of the graph; the numeric side holds detached values fixed.
    pub fn check(&self, h: f64) -> Result<GradCheckReport> {
        check_gradients_split(
            &self.leaves,
            |t, l| self.build(t, l),
            |t, l| self.build_frozen(t, l),
            h,
        )
    }

    /// Replays the program on `tape` over the given leaf variables.
    pub fn build(&self, tape: &mut Tape, leaves: &[Var]) -> Result<Var> {
        self.reduce(tape, leaves, false)
    }

    /// As [`RandomGraph::build`], with every `Detach` replaced by its value at
    /// the generation point.
    pub fn build_frozen(&self, tape: &mut Tape, leaves: &[Var]) -> Result<Var> {
        self.reduce(tape, leaves, true)
    }

    fn reduce(&self, tape: &mut Tape, leaves: &[Var], frozen: bool) -> Result<Var> {
        let values = self.replay(tape, leaves, frozen)?;
        let mut total: Option<Var> = None;
        for (k, w) in self.weights.iter().enumerate() {
            let v = values[leaves.len() + k];
            let c = tape.constant(w.clone());
            let term = if w.shape().is_empty() {
                let s = tape.reshape(v, vec![])?;
                tape.mul(s, c)?
            } else {
                let m = tape.mul(v, c)?;
                tape.mean(m)?
            };
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
        Ok(total.expect("graph has at least one step"))
    }

    fn replay(&self, tape: &mut Tape, leaves: &[Var], frozen: bool) -> Result<Vec<Var>> {
        let mut vals: Vec<Var> = leaves.to_vec();
        for (k, step) in self.steps.iter().enumerate() {
            let v = match step {
                GraphStep::Add(a, b) => tape.add(vals[*a], vals[*b])?,
                GraphStep::Sub(a, b) => tape.sub(vals[*a], vals[*b])?,
                GraphStep::Mul(a, b) => tape.mul(vals[*a], vals[*b])?,
                GraphStep::Minimum(a, b) => tape.minimum(vals[*a], vals[*b])?,
                GraphStep::Scale(a, c) => tape.scale(vals[*a], *c)?,
                GraphStep::MatMul(a, b) => tape.matmul(vals[*a], vals[*b])?,
                GraphStep::Affine(x, w, b) => tape.affine(vals[*x], vals[*w], vals[*b])?,
                GraphStep::Relu(a) => tape.relu(vals[*a])?,
                GraphStep::Tanh(a) => tape.tanh(vals[*a])?,
                GraphStep::Exp(a) => tape.exp(vals[*a])?,
                GraphStep::Clamp(a, lo, hi) => tape.clamp(vals[*a], *lo, *hi)?,
                GraphStep::Concat(parts) => {
                    let vs: Vec<Var> = parts.iter().map(|&p| vals[p]).collect();
                    tape.concat(&vs)?
                }
                GraphStep::Slice(a, s, e) => tape.slice(vals[*a], *s, *e)?,
                GraphStep::Reshape(a, shape) => tape.reshape(vals[*a], shape.clone())?,
                GraphStep::Softmax(a, t) => tape.softmax_temp(vals[*a], *t)?,
                GraphStep::LogSoftmax(a, t) => tape.log_softmax_temp(vals[*a], *t)?,
                GraphStep::Detach(a) => match (frozen, self.frozen.get(k)) {
                    (true, Some(Some(value))) => tape.constant(value.clone()),
                    _ => tape.detach(vals[*a])?,
                },
                GraphStep::Gather(a, idx) => tape.gather(vals[*a], idx)?,
                GraphStep::Sum(a) => tape.sum(vals[*a])?,
                GraphStep::Mean(a) => tape.mean(vals[*a])?,
                GraphStep::Nll(a, t) => tape.nll_loss(vals[*a], t)?,
                GraphStep::Kl(a, b) => tape.kl_divergence(vals[*a], vals[*b])?,
                GraphStep::KlLogits(a, b, t) => tape.kl_logits(vals[*a], vals[*b], *t)?,
                GraphStep::L2(a, b) => tape.l2_distance(vals[*a], vals[*b])?,
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Smallest distance of any input to a non-differentiable point
    /// (ReLU at 0, clamp bounds, ties in minimum).
    pub fn kink_margin(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = self.leaves.iter().map(|t| tape.constant(t.clone())).collect();
        let vals = self.replay(&mut tape, &leaves, false)?;
        let mut margin = f64::INFINITY;
        let data = |v: usize| tape.value(vals[v]).data().to_vec();
        for step in &self.steps {
            match step {
                GraphStep::Relu(a) => {
                    for x in data(*a) {
                        margin = margin.min(x.abs());
                    }
                }
                GraphStep::Clamp(a, lo, hi) => {
                    for x in data(*a) {
                        margin = margin.min((x - lo).abs()).min((x - hi).abs());
                    }
                }
                GraphStep::Minimum(a, b) => {
                    for (x, y) in data(*a).into_iter().zip(data(*b)) {
                        if *a != *b {
                            margin = margin.min((x - y).abs());
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(margin)
    }

    pub fn op_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.steps.iter().map(GraphStep::name)
    }
}
