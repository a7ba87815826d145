//! Named parameter collections and first-order optimizers.

use crate::error::{AutodiffError, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered, uniquely named set of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(AutodiffError::ParamMismatch(format!("duplicate parameter `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar values.
    pub fn value_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), tracked)).collect(),
        }
    }
}

/// Tape handles for a [`ParamSet`], in parameter order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Handles that were created some other way, e.g. by a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
    AdamW,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(Self::Sgd),
            "sgd-momentum" => Some(Self::SgdMomentum),
            "adam" => Some(Self::Adam),
            "adamw" => Some(Self::AdamW),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Used by `SgdMomentum` only.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 penalty for SGD and Adam, decoupled decay for AdamW.
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn sgd_momentum(lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            momentum,
            ..Self::sgd(lr)
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr)
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            weight_decay,
            ..Self::sgd(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AutodiffError::InvalidArgument { op: "optimizer", message: m });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)".into());
        }
        Ok(())
    }
}

/// Optimizer hyperparameters plus per-parameter accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    /// Momentum buffers (SGD-momentum) or first moments (Adam).
    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    fn ensure_shapes(&mut self, params: &ParamSet) -> Result<()> {
        let sizes: Vec<usize> = params.tensors().iter().map(Tensor::len).collect();
        if self.first.is_empty() {
            self.first = sizes.iter().map(|&n| vec![0.0; n]).collect();
            if matches!(self.config.kind, OptimizerKind::Adam | OptimizerKind::AdamW) {
                self.second = sizes.iter().map(|&n| vec![0.0; n]).collect();
            }
            return Ok(());
        }
        if self.first.len() != sizes.len() || self.first.iter().zip(&sizes).any(|(b, &n)| b.len() != n) {
            return Err(AutodiffError::ParamMismatch(
                "optimizer state was created for a different parameter set".into(),
            ));
        }
        Ok(())
    }
}

/// Applies one update using gradients read from `grads` for each bound parameter.
pub fn optimizer_step(
    params: &mut ParamSet,
    bound: &BoundParams,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<()> {
    if bound.vars().len() != params.len() {
        return Err(AutodiffError::ParamMismatch(format!(
            "{} bound variables for {} parameters",
            bound.vars().len(),
            params.len()
        )));
    }
    let mut slices = Vec::with_capacity(params.len());
    for (i, name) in params.names().iter().enumerate() {
        let g = grads
            .get(bound.var(i))
            .ok_or_else(|| AutodiffError::MissingGradient(name.clone()))?;
        if g.len() != params.tensors()[i].len() {
            return Err(AutodiffError::ParamMismatch(format!("gradient size for `{name}`")));
        }
        slices.push(g);
    }
    apply_update(params, &slices, state)
}

/// Update from explicit gradient slices aligned with `params`.
pub fn apply_update(params: &mut ParamSet, grads: &[&[f64]], state: &mut OptimizerState) -> Result<()> {
    if grads.len() != params.len() {
        return Err(AutodiffError::ParamMismatch(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.ensure_shapes(params)?;
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, tensor) in params.tensors.iter_mut().enumerate() {
        let g = grads[i];
        let p = tensor.data_mut();
        match c.kind {
            OptimizerKind::Sgd => {
                for j in 0..p.len() {
                    let gj = g[j] + c.weight_decay * p[j];
                    p[j] -= c.lr * gj;
                }
            }
            OptimizerKind::SgdMomentum => {
                let buf = &mut state.first[i];
                for j in 0..p.len() {
                    let gj = g[j] + c.weight_decay * p[j];
                    buf[j] = c.momentum * buf[j] + gj;
                    p[j] -= c.lr * buf[j];
                }
            }
            OptimizerKind::Adam | OptimizerKind::AdamW => {
                let decoupled = c.kind == OptimizerKind::AdamW;
                let (m, v) = (&mut state.first[i], &mut state.second[i]);
                for j in 0..p.len() {
                    let gj = if decoupled { g[j] } else { g[j] + c.weight_decay * p[j] };
                    if decoupled && c.weight_decay > 0.0 {
                        p[j] -= c.lr * c.weight_decay * p[j];
                    }
                    m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                    v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    p[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
                }
            }
        }
    }
    Ok(())
}
