//! Small differentiable models: MLP classifier, tanh RNN language model and a
//! shared-trunk policy/value network.

use std::io::{Read, Write};

use lot_autodiff::{BoundParams, ParamSet, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{get_f64s, get_len, get_u32, get_u64, put_f64s, put_u64};
use crate::error::{config_err, LotError, Result};
use crate::seed::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Self::Relu),
            "tanh" => Some(Self::Tanh),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::Tanh => "tanh",
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(match self {
            Self::Relu => tape.relu(x)?,
            Self::Tanh => tape.tanh(x)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        activation: Activation,
        classes: usize,
    },
    Rnn {
        vocab: usize,
        hidden: usize,
        window: usize,
    },
    PolicyValue {
        input_dim: usize,
        trunk: Vec<usize>,
        activation: Activation,
        actions: usize,
    },
}

impl ModelSpec {
    /// Two hidden relu layers of width 64.
    pub fn default_mlp(input_dim: usize, classes: usize) -> Self {
        Self::Mlp {
            input_dim,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            classes,
        }
    }

    pub fn default_rnn(vocab: usize) -> Self {
        Self::Rnn {
            vocab,
            hidden: 64,
            window: 16,
        }
    }

    pub fn default_policy(input_dim: usize, actions: usize) -> Self {
        Self::PolicyValue {
            input_dim,
            trunk: vec![64, 64],
            activation: Activation::Tanh,
            actions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (input, widths, out) = match self {
            Self::Mlp {
                input_dim,
                hidden,
                classes,
                ..
            } => (*input_dim, hidden.as_slice(), *classes),
            Self::Rnn { vocab, hidden, window } => {
                if *window == 0 {
                    return config_err("rnn window must be at least 1");
                }
                (*vocab, std::slice::from_ref(hidden), *vocab)
            }
            Self::PolicyValue {
                input_dim,
                trunk,
                actions,
                ..
            } => (*input_dim, trunk.as_slice(), *actions),
        };
        if input == 0 || widths.contains(&0) {
            return config_err(format!("all widths must be positive in {self:?}"));
        }
        if out < 2 {
            return config_err(format!("output count must be at least 2 in {self:?}"));
        }
        Ok(())
    }

    /// Number of categories in the predictive distribution.
    pub fn output_count(&self) -> usize {
        match self {
            Self::Mlp { classes, .. } => *classes,
            Self::Rnn { vocab, .. } => *vocab,
            Self::PolicyValue { actions, .. } => *actions,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Mlp { input_dim, .. } | Self::PolicyValue { input_dim, .. } => *input_dim,
            Self::Rnn { vocab, .. } => *vocab,
        }
    }

    /// `(name, shape, init bound)` for every parameter in order. A bound of
    /// zero means the tensor starts at zero.
    fn layout(&self) -> Vec<(String, Vec<usize>, f64)> {
        let lecun = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let mut out = Vec::new();
        let dense = |out: &mut Vec<_>, prefix: String, fan_in: usize, width: usize, bound: f64| {
            out.push((format!("{prefix}.weight"), vec![fan_in, width], bound));
            out.push((format!("{prefix}.bias"), vec![width], 0.0));
        };
        match self {
            Self::Mlp {
                input_dim,
                hidden,
                activation,
                classes,
            }
            | Self::PolicyValue {
                input_dim,
                trunk: hidden,
                activation,
                actions: classes,
            } => {
                let mut fan_in = *input_dim;
                for (i, &w) in hidden.iter().enumerate() {
                    let bound = match activation {
                        Activation::Relu => he(fan_in),
                        Activation::Tanh => lecun(fan_in),
                    };
                    dense(&mut out, format!("hidden.{i}"), fan_in, w, bound);
                    fan_in = w;
                }
                if let Self::PolicyValue { .. } = self {
                    // A near-zero policy head starts from an almost uniform policy.
                    dense(&mut out, "policy".into(), fan_in, *classes, 0.01 * lecun(fan_in));
                    dense(&mut out, "value".into(), fan_in, 1, lecun(fan_in));
                } else {
                    dense(&mut out, "out".into(), fan_in, *classes, lecun(fan_in));
                }
            }
            Self::Rnn { vocab, hidden, .. } => {
                out.push(("embed.weight".into(), vec![*vocab, *hidden], lecun(*vocab)));
                out.push(("recur.weight".into(), vec![*hidden, *hidden], lecun(*hidden)));
                out.push(("recur.bias".into(), vec![*hidden], 0.0));
                dense(&mut out, "out".into(), *hidden, *vocab, lecun(*hidden));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub seed: u64,
    pub params: ParamSet,
}

/// Weights uniform in `±bound` with a fan-in scaled bound (`sqrt(6/fan_in)`
/// before relu, `sqrt(3/fan_in)` elsewhere); biases zero.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = rng_from(seed);
    let mut params = ParamSet::new();
    for (name, shape, bound) in spec.layout() {
        let n: usize = shape.iter().product();
        let values = if bound > 0.0 {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        } else {
            vec![0.0; n]
        };
        params.insert(name, Tensor::new(shape, values)?)?;
    }
    Ok(Model {
        spec: spec.clone(),
        seed,
        params,
    })
}

impl Model {
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> BoundModel {
        BoundModel {
            spec: self.spec.clone(),
            vars: self.params.bind(tape, tracked),
        }
    }

    /// Same spec and seed with every parameter set to zero.
    pub fn zeroed(&self) -> Model {
        let mut m = self.clone();
        for name in self.params.names().to_vec() {
            let t = m.params.get_mut(&name).expect("name from the same set");
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }
}

/// Parameters of a model placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub spec: ModelSpec,
    pub vars: BoundParams,
}

impl BoundModel {
    fn layer(&self, i: usize) -> (Var, Var) {
        (self.vars.var(2 * i), self.vars.var(2 * i + 1))
    }
}

/// Logits `[batch, classes]` of an MLP.
pub fn forward_classifier(tape: &mut Tape, net: &BoundModel, inputs: Var) -> Result<Var> {
    let ModelSpec::Mlp {
        input_dim,
        hidden,
        activation,
        ..
    } = &net.spec
    else {
        return config_err("forward_classifier needs an MLP spec");
    };
    check_features(tape, inputs, *input_dim)?;
    let mut h = inputs;
    for i in 0..hidden.len() {
        let (w, b) = net.layer(i);
        h = tape.affine(h, w, b)?;
        h = activation.apply(tape, h)?;
    }
    let (w, b) = net.layer(hidden.len());
    Ok(tape.affine(h, w, b)?)
}

/// Action logits `[batch, actions]` and values `[batch, 1]`.
pub fn forward_policy(tape: &mut Tape, net: &BoundModel, states: Var) -> Result<(Var, Var)> {
    let (h, depth) = policy_trunk(tape, net, states)?;
    let (pw, pb) = net.layer(depth);
    let (vw, vb) = net.layer(depth + 1);
    let logits = tape.affine(h, pw, pb)?;
    let values = tape.affine(h, vw, vb)?;
    Ok((logits, values))
}

/// Only the policy head, for imitation and regularization.
pub fn forward_policy_logits(tape: &mut Tape, net: &BoundModel, states: Var) -> Result<Var> {
    let (h, depth) = policy_trunk(tape, net, states)?;
    let (pw, pb) = net.layer(depth);
    Ok(tape.affine(h, pw, pb)?)
}

fn policy_trunk(tape: &mut Tape, net: &BoundModel, states: Var) -> Result<(Var, usize)> {
    let ModelSpec::PolicyValue {
        input_dim,
        trunk,
        activation,
        ..
    } = &net.spec
    else {
        return config_err("forward_policy needs a policy/value spec");
    };
    check_features(tape, states, *input_dim)?;
    let mut h = states;
    for i in 0..trunk.len() {
        let (w, b) = net.layer(i);
        h = tape.affine(h, w, b)?;
        h = activation.apply(tape, h)?;
    }
    Ok((h, trunk.len()))
}

fn check_features(tape: &Tape, x: Var, dim: usize) -> Result<()> {
    let shape = tape.try_value(x)?.shape();
    if shape.len() != 2 || shape[1] != dim {
        return Err(LotError::Autodiff(lot_autodiff::AutodiffError::ShapeMismatch {
            op: "model input",
            left: shape.to_vec(),
            right: vec![dim],
        }));
    }
    Ok(())
}

/// Next-token logits for a batch of equal-length token sequences.
///
/// Row `t * batch + b` of the result predicts token `t + 1` of sequence `b`
/// from tokens `0..=t`. The hidden state is detached every `window`
/// positions, truncating backpropagation through time.
pub fn forward_rnn(tape: &mut Tape, net: &BoundModel, sequences: &[&[usize]]) -> Result<Var> {
    let ModelSpec::Rnn { vocab, hidden, window } = &net.spec else {
        return config_err("forward_rnn needs an RNN spec");
    };
    let (vocab, hidden, window) = (*vocab, *hidden, *window);
    let batch = sequences.len();
    let len = sequences.first().map_or(0, |s| s.len());
    if batch == 0 || len == 0 || sequences.iter().any(|s| s.len() != len) {
        return config_err("forward_rnn needs a non-empty batch of equal-length sequences");
    }
    if let Some(&bad) = sequences.iter().flat_map(|s| s.iter()).find(|&&t| t >= vocab) {
        return Err(LotError::Data(format!("token {bad} out of range for vocabulary {vocab}")));
    }
    let embed = net.vars.var(0);
    let (rw, rb) = (net.vars.var(1), net.vars.var(2));
    let (ow, ob) = (net.vars.var(3), net.vars.var(4));
    let mut h = tape.constant(Tensor::zeros(vec![batch, hidden])?);
    let mut outputs = Vec::with_capacity(len);
    for t in 0..len {
        if t > 0 && t % window == 0 {
            h = tape.detach(h)?;
        }
        let mut onehot = vec![0.0; batch * vocab];
        for (b, s) in sequences.iter().enumerate() {
            onehot[b * vocab + s[t]] = 1.0;
        }
        let x = tape.constant(Tensor::matrix(batch, vocab, onehot)?);
        let ex = tape.matmul(x, embed)?;
        let rec = tape.affine(h, rw, rb)?;
        let pre = tape.add(ex, rec)?;
        h = tape.tanh(pre)?;
        outputs.push(tape.affine(h, ow, ob)?);
    }
    Ok(if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat(&outputs)?
    })
}

/// Logits of an MLP on a plain matrix, without gradient tracking.
pub fn predict_logits(model: &Model, inputs: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let net = model.bind(&mut tape, false);
    let x = tape.constant(inputs.clone());
    let y = forward_classifier(&mut tape, &net, x)?;
    Ok(tape.value(y).clone())
}

/// Argmax per row; the first maximum wins.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (rows, _) = logits.rows_cols();
    (0..rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

const CKPT_MAGIC: &[u8; 4] = b"LOTC";
const CKPT_VERSION: u32 = 1;

/// `LOTC | version u32 | spec JSON (u32 length + bytes) | seed u64 |
/// param count u32 | per param: name (u32 length + bytes), ndim u32,
/// dims u64 each, f64 LE values`.
pub fn save_checkpoint<W: Write>(w: &mut W, model: &Model) -> Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let spec = serde_json::to_vec(&model.spec)?;
    w.write_all(&(spec.len() as u32).to_le_bytes())?;
    w.write_all(&spec)?;
    put_u64(w, model.seed)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            put_u64(w, d as u64)?;
        }
        put_f64s(w, t.data())?;
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(r: &mut R) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(LotError::Format("not a LOTC checkpoint".into()));
    }
    let version = get_u32(r)?;
    if version != CKPT_VERSION {
        return Err(LotError::Format(format!("unsupported checkpoint version {version}")));
    }
    let spec_len = get_u32(r)? as usize;
    if spec_len > 1 << 20 {
        return Err(LotError::Format("spec descriptor too large".into()));
    }
    let mut spec_bytes = vec![0u8; spec_len];
    r.read_exact(&mut spec_bytes)?;
    let spec: ModelSpec = serde_json::from_slice(&spec_bytes)?;
    spec.validate()?;
    let seed = get_u64(r)?;
    let count = get_u32(r)? as usize;
    let layout = spec.layout();
    if count != layout.len() {
        return Err(LotError::Format(format!("{count} parameters, spec expects {}", layout.len())));
    }
    let mut params = ParamSet::new();
    for (expected_name, expected_shape, _) in layout {
        let name_len = get_u32(r)? as usize;
        if name_len > 4096 {
            return Err(LotError::Format("parameter name too long".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| LotError::Format("parameter name is not UTF-8".into()))?;
        let ndim = get_u32(r)? as usize;
        let shape = (0..ndim).map(|_| get_len(r)).collect::<Result<Vec<_>>>()?;
        if name != expected_name || shape != expected_shape {
            return Err(LotError::Format(format!(
                "parameter {name} {shape:?} does not match spec ({expected_name} {expected_shape:?})"
            )));
        }
        let values = get_f64s(r, shape.iter().product())?;
        params.insert(name, Tensor::new(shape, values)?)?;
    }
    Ok(Model { spec, seed, params })
}
