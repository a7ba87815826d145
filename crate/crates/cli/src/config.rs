//! Flat dotted-key configuration with a fixed key table.
//!
//! Every key has a default, files and overrides may only set known keys, and
//! the resolved table renders back to a file that loads to the same result.

use std::path::Path;

use lot_autodiff::{OptimizerConfig, OptimizerKind};
use lot_core::data::ClusterParams;
use lot_core::harness::{DatasetSpec, ExperimentSpec, HypothesisConfig, ModelConfig, Recipe};
use lot_core::model::Activation;
use lot_core::rl::{GridWorld, PpoConfig};
use lot_core::seed::derive_seed;
use lot_core::train::{BanConfig, KlDirection, LotConfig, MetricKind, RunSeeds};
use toml::Value;

use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn float_list(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|&x| Value::Float(x)).collect())
}

fn int_list(v: &[i64]) -> Value {
    Value::Array(v.iter().map(|&x| Value::Integer(x)).collect())
}

fn optim_defaults(prefix: &str, o: OptimizerConfig) -> Vec<(String, Value)> {
    vec![
        (format!("{prefix}.kind"), Value::String(o.kind.as_str().into())),
        (format!("{prefix}.lr"), Value::Float(o.lr)),
        (format!("{prefix}.momentum"), Value::Float(o.momentum)),
        (format!("{prefix}.beta1"), Value::Float(o.beta1)),
        (format!("{prefix}.beta2"), Value::Float(o.beta2)),
        (format!("{prefix}.eps"), Value::Float(o.eps)),
        (format!("{prefix}.weight_decay"), Value::Float(o.weight_decay)),
    ]
}

/// The key table in render order. `lot.lambdas` and `ppo.lambdas` default to
/// empty, meaning uniform over the configured student count; the eval
/// cadences default to 0, meaning the built-in cadence. Both render resolved.
fn default_table() -> Vec<(String, Value)> {
    let lot = LotConfig::default();
    let ppo = PpoConfig::default();
    let ban = BanConfig::default();
    let hyp = HypothesisConfig::default();
    let s = |k: &str, v: &str| (k.to_string(), Value::String(v.into()));
    let f = |k: &str, v: f64| (k.to_string(), Value::Float(v));
    let i = |k: &str, v: i64| (k.to_string(), Value::Integer(v));
    let mut t = vec![
        i("seed", 0),
        i("replicates", 5),
        i("threads", 1),
        f("lot.alpha", lot.alpha),
        i("lot.n", lot.student_steps as i64),
        i("lot.students", 1),
        ("lot.lambdas".into(), float_list(&[])),
        f("lot.temperature", lot.temperature),
        s("lot.metric", lot.metric.as_str()),
        s("lot.kl_direction", lot.direction.as_str()),
        i("lot.budget", lot.total_update_budget as i64),
        i("lot.teacher_batch", lot.teacher_batch as i64),
        i("lot.student_batch", lot.student_batch as i64),
        i("lot.eval_every", 0),
    ];
    t.extend(optim_defaults("lot.teacher_optim", lot.teacher_optim));
    t.extend(optim_defaults("lot.student_optim", lot.student_optim));
    t.extend([
        s("dataset.kind", "spirals"),
        i("dataset.classes", 3),
        i("dataset.per_class", 100),
        i("dataset.test_per_class", 200),
        f("dataset.noise", 0.1),
        i("dataset.dim", 8),
        f("dataset.spread", 1.5),
        f("dataset.label_noise", 0.2),
        i("dataset.student_pool", 0),
        i("dataset.vocab", 12),
        i("dataset.train_len", 3000),
        i("dataset.test_len", 2000),
        f("dataset.concentration", 0.5),
        i("dataset.seq_len", 16),
        ("model.teacher.hidden".into(), int_list(&[64, 64])),
        s("model.teacher.activation", "relu"),
        ("model.student.hidden".into(), int_list(&[64, 64])),
        s("model.student.activation", "relu"),
        i("model.window", 16),
        ("model.policy.hidden".into(), int_list(&[64, 64])),
        s("model.policy.activation", "tanh"),
        f("ban.hard_weight", ban.hard_weight),
        f("ban.soft_weight", ban.soft_weight),
        f("ban.temperature", ban.temperature),
        f("hypothesis.subset_fraction", hyp.subset_fraction),
        f("hypothesis.margin", hyp.margin),
        i("hypothesis.imitate_steps", hyp.imitate_steps as i64),
        i("hypothesis.imitate_batch", hyp.imitate_batch as i64),
        f("hypothesis.temperature", hyp.temperature),
        i("hypothesis.eval_every", hyp.eval_every as i64),
    ]);
    t.extend(optim_defaults("hypothesis.optim", hyp.imitate_optim));
    t.extend([
        ("sweep.alpha".into(), float_list(&[0.0, 0.25, 0.5, 1.0, 1.5, 1.7])),
        ("sweep.n".into(), int_list(&[1, 2, 4, 5, 8])),
        f("verdict.majority", 0.8),
        f("ppo.gamma", ppo.gamma),
        f("ppo.gae_lambda", ppo.gae_lambda),
        f("ppo.clip", ppo.clip),
        i("ppo.epochs", ppo.epochs as i64),
        i("ppo.minibatch", ppo.minibatch as i64),
        f("ppo.value_coef", ppo.value_coef),
        f("ppo.entropy_coef", ppo.entropy_coef),
        i("ppo.rollout_len", ppo.rollout_len as i64),
        i("ppo.env_steps", ppo.total_env_steps as i64),
        i("ppo.replay_capacity", ppo.replay_capacity as i64),
        i("ppo.eval_episodes", ppo.eval_episodes as i64),
        i("ppo.eval_every", 0),
        f("ppo.alpha", ppo.lot.alpha),
        i("ppo.n", ppo.lot.student_steps as i64),
        i("ppo.students", 1),
        ("ppo.lambdas".into(), float_list(&[])),
        f("ppo.temperature", ppo.lot.temperature),
        s("ppo.metric", ppo.lot.metric.as_str()),
        s("ppo.kl_direction", ppo.lot.direction.as_str()),
        i("ppo.student_batch", ppo.lot.student_batch as i64),
    ]);
    t.extend(optim_defaults("ppo.teacher_optim", ppo.lot.teacher_optim));
    t.extend(optim_defaults("ppo.student_optim", ppo.lot.student_optim));
    t.extend([s("env.map", "standard"), f("env.p_slip", 0.1), i("env.max_steps", 100)]);
    t
}

/// Every key with its current value, in table order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawConfig {
    entries: Vec<(String, Value)>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// Parses the right-hand side of an override; bare words are strings.
fn parse_value(text: &str) -> Value {
    match format!("v = {text}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.into())),
        Err(_) => Value::String(text.into()),
    }
}

impl Default for RawConfig {
    fn default() -> Self {
        Self { entries: default_table() }
    }
}

impl RawConfig {
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => {
                slot.1 = value;
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown config key `{key}`"))),
        }
    }

    /// Applies a document of dotted keys (tables are flattened).
    pub fn apply_document(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("malformed config: {e}")))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        for (k, v) in flat {
            self.set(&k, v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(CliError::Config(format!("override `{assignment}` is not key=value")));
        };
        self.set(key.trim(), parse_value(value.trim()))
    }

    /// `key = value` lines, loadable with [`RawConfig::apply_document`].
    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn type_err<T>(&self, key: &str, want: &str) -> Result<T> {
        Err(CliError::Config(format!(
            "`{key}` must be {want}, got {}",
            self.get(key).map_or_else(|| "nothing".into(), Value::to_string)
        )))
    }

    fn float(&self, key: &str) -> Result<f64> {
        match self.get(key) {
            Some(Value::Float(x)) => Ok(*x),
            Some(Value::Integer(x)) => Ok(*x as f64),
            _ => self.type_err(key, "a number"),
        }
    }

    fn uint(&self, key: &str) -> Result<u64> {
        match self.get(key) {
            Some(Value::Integer(x)) if *x >= 0 => Ok(*x as u64),
            _ => self.type_err(key, "a non-negative integer"),
        }
    }

    fn usize(&self, key: &str) -> Result<usize> {
        Ok(self.uint(key)? as usize)
    }

    fn string(&self, key: &str) -> Result<&str> {
        match self.get(key) {
            Some(Value::String(s)) => Ok(s),
            _ => self.type_err(key, "a string"),
        }
    }

    fn floats(&self, key: &str) -> Result<Vec<f64>> {
        let Some(Value::Array(items)) = self.get(key) else {
            return self.type_err(key, "a list of numbers");
        };
        items
            .iter()
            .map(|v| match v {
                Value::Float(x) => Ok(*x),
                Value::Integer(x) => Ok(*x as f64),
                _ => self.type_err(key, "a list of numbers"),
            })
            .collect()
    }

    fn uints(&self, key: &str) -> Result<Vec<usize>> {
        let Some(Value::Array(items)) = self.get(key) else {
            return self.type_err(key, "a list of non-negative integers");
        };
        items
            .iter()
            .map(|v| match v {
                Value::Integer(x) if *x >= 0 => Ok(*x as usize),
                _ => self.type_err(key, "a list of non-negative integers"),
            })
            .collect()
    }

    fn parsed<T>(&self, key: &str, parse: impl Fn(&str) -> Option<T>, want: &str) -> Result<T> {
        let s = self.string(key)?;
        parse(s).map_or_else(|| self.type_err(key, want), Ok)
    }

    fn optim(&self, prefix: &str) -> Result<OptimizerConfig> {
        let key = |k: &str| format!("{prefix}.{k}");
        Ok(OptimizerConfig {
            kind: self.parsed(&key("kind"), OptimizerKind::parse, "one of sgd, sgd-momentum, adam, adamw")?,
            lr: self.float(&key("lr"))?,
            momentum: self.float(&key("momentum"))?,
            beta1: self.float(&key("beta1"))?,
            beta2: self.float(&key("beta2"))?,
            eps: self.float(&key("eps"))?,
            weight_decay: self.float(&key("weight_decay"))?,
        })
    }

    fn model(&self, prefix: &str) -> Result<ModelConfig> {
        Ok(ModelConfig {
            hidden: self.uints(&format!("{prefix}.hidden"))?,
            activation: self.parsed(&format!("{prefix}.activation"), Activation::parse, "relu or tanh")?,
            window: self.usize("model.window")?,
        })
    }

    /// Student weights: an explicit list must have one entry per student and
    /// sum to 1; an empty list means uniform.
    fn lambdas(&self, prefix: &str) -> Result<Vec<f64>> {
        let k = self.usize(&format!("{prefix}.students"))?;
        if k == 0 {
            return Err(CliError::Config(format!("`{prefix}.students` must be at least 1")));
        }
        let given = self.floats(&format!("{prefix}.lambdas"))?;
        if given.is_empty() {
            return Ok(vec![1.0 / k as f64; k]);
        }
        if given.len() != k {
            return Err(CliError::Config(format!(
                "`{prefix}.lambdas` has {} entries for {k} students",
                given.len()
            )));
        }
        let total: f64 = given.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!("`{prefix}.lambdas` must sum to 1, got {total}")));
        }
        Ok(given)
    }

    fn lot(&self, prefix: &str, lambdas: Vec<f64>, master: u64) -> Result<LotConfig> {
        let key = |k: &str| format!("{prefix}.{k}");
        Ok(LotConfig {
            alpha: self.float(&key("alpha"))?,
            student_steps: self.usize(&key("n"))?,
            seeds: RunSeeds::from_master(master, lambdas.len()),
            lambdas,
            temperature: self.float(&key("temperature"))?,
            metric: self.parsed(&key("metric"), MetricKind::parse, "kl or l2")?,
            direction: self.parsed(&key("kl_direction"), KlDirection::parse, "literal or student_first")?,
            teacher_optim: self.optim(&key("teacher_optim"))?,
            student_optim: self.optim(&key("student_optim"))?,
            total_update_budget: 0,
            teacher_batch: 1,
            student_batch: self.usize(&key("student_batch"))?,
            eval_every: None,
        })
    }

    fn dataset(&self) -> Result<DatasetSpec> {
        let classes = self.usize("dataset.classes")?;
        let per_class = self.usize("dataset.per_class")?;
        let test_per_class = self.usize("dataset.test_per_class")?;
        match self.string("dataset.kind")? {
            "spirals" => Ok(DatasetSpec::Spirals {
                classes,
                per_class,
                test_per_class,
                noise: self.float("dataset.noise")?,
            }),
            "clusters" => Ok(DatasetSpec::Clusters {
                params: ClusterParams {
                    class_count: classes,
                    dim: self.usize("dataset.dim")?,
                    per_class_count: per_class,
                    cluster_spread: self.float("dataset.spread")?,
                    label_noise_rate: self.float("dataset.label_noise")?,
                },
                test_per_class,
                student_pool: match self.usize("dataset.student_pool")? {
                    0 => None,
                    n => Some(n),
                },
            }),
            "markov" => Ok(DatasetSpec::Markov {
                vocab: self.usize("dataset.vocab")?,
                train_len: self.usize("dataset.train_len")?,
                test_len: self.usize("dataset.test_len")?,
                concentration: self.float("dataset.concentration")?,
                seq_len: self.usize("dataset.seq_len")?,
            }),
            _ => self.type_err("dataset.kind", "one of spirals, clusters, markov"),
        }
    }

    fn world(&self) -> Result<GridWorld> {
        let p_slip = self.float("env.p_slip")?;
        let max_steps = self.usize("env.max_steps")?;
        let world = match self.string("env.map")? {
            "standard" => GridWorld::parse_map(lot_core::rl::STANDARD_MAP, p_slip, max_steps),
            path => GridWorld::load_map(Path::new(path), p_slip, max_steps),
        };
        world.map_err(|e| CliError::Config(format!("`env.map`: {e}")))
    }
}

/// A fully typed configuration plus its explicit echo.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub master_seed: u64,
    pub spec: ExperimentSpec,
    pub raw: RawConfig,
}

impl Resolved {
    /// The text written to `config.resolved`.
    pub fn render(&self) -> String {
        self.raw.render()
    }
}

/// Loads `file` (if any) over the defaults, then `overrides`, then a
/// `LOT_SEED` value, and resolves the result.
pub fn parse_config(file: Option<&Path>, overrides: &[String], lot_seed: Option<&str>) -> Result<Resolved> {
    let mut raw = RawConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        raw.apply_document(&text)?;
    }
    for o in overrides {
        raw.apply_override(o)?;
    }
    if let Some(s) = lot_seed {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("LOT_SEED must be an unsigned integer, got `{s}`")))?;
        let seed = i64::try_from(seed).map_err(|_| CliError::Config("LOT_SEED exceeds 2^63 - 1".into()))?;
        raw.set("seed", Value::Integer(seed))?;
    }
    resolve(raw)
}

/// Builds the typed experiment and rewrites derived defaults explicitly.
pub fn resolve(mut raw: RawConfig) -> Result<Resolved> {
    let master = raw.uint("seed")?;
    let replicates = raw.usize("replicates")?;
    if replicates == 0 {
        return Err(CliError::Config("`replicates` must be at least 1".into()));
    }

    let lambdas = raw.lambdas("lot")?;
    let mut lot = raw.lot("lot", lambdas.clone(), master)?;
    lot.total_update_budget = raw.uint("lot.budget")?;
    lot.teacher_batch = raw.usize("lot.teacher_batch")?;
    lot.eval_every = match raw.uint("lot.eval_every")? {
        0 => None,
        n => Some(n),
    };
    let lot_cadence = lot.eval_cadence();

    let ppo_lambdas = raw.lambdas("ppo")?;
    let mut ppo_lot = raw.lot("ppo", ppo_lambdas.clone(), master)?;
    ppo_lot.total_update_budget = PpoConfig::default().lot.total_update_budget;
    ppo_lot.teacher_batch = raw.usize("ppo.minibatch")?;
    let mut ppo = PpoConfig {
        gamma: raw.float("ppo.gamma")?,
        gae_lambda: raw.float("ppo.gae_lambda")?,
        clip: raw.float("ppo.clip")?,
        epochs: raw.usize("ppo.epochs")?,
        minibatch: raw.usize("ppo.minibatch")?,
        value_coef: raw.float("ppo.value_coef")?,
        entropy_coef: raw.float("ppo.entropy_coef")?,
        rollout_len: raw.usize("ppo.rollout_len")?,
        total_env_steps: raw.uint("ppo.env_steps")?,
        replay_capacity: raw.usize("ppo.replay_capacity")?,
        lot: ppo_lot,
        env_seed: derive_seed(master, "env"),
        eval_episodes: raw.usize("ppo.eval_episodes")?,
        eval_every: match raw.uint("ppo.eval_every")? {
            0 => None,
            n => Some(n),
        },
    };
    let ppo_cadence = ppo.eval_cadence();
    ppo.eval_every = Some(ppo_cadence);
    lot.eval_every = Some(lot_cadence);

    let hypothesis = HypothesisConfig {
        subset_fraction: raw.float("hypothesis.subset_fraction")?,
        margin: raw.float("hypothesis.margin")?,
        imitate_steps: raw.uint("hypothesis.imitate_steps")?,
        imitate_batch: raw.usize("hypothesis.imitate_batch")?,
        imitate_optim: raw.optim("hypothesis.optim")?,
        temperature: raw.float("hypothesis.temperature")?,
        eval_every: raw.uint("hypothesis.eval_every")?,
    };
    let spec = ExperimentSpec {
        recipe: Recipe::Compare,
        lot,
        ppo,
        world: raw.world()?,
        dataset: raw.dataset()?,
        teacher_model: raw.model("model.teacher")?,
        student_model: raw.model("model.student")?,
        policy_model: raw.model("model.policy")?,
        alpha_values: raw.floats("sweep.alpha")?,
        n_values: raw.uints("sweep.n")?,
        seeds: ExperimentSpec::replicate_seeds(master, replicates),
        ban: BanConfig {
            hard_weight: raw.float("ban.hard_weight")?,
            soft_weight: raw.float("ban.soft_weight")?,
            temperature: raw.float("ban.temperature")?,
        },
        hypothesis,
        majority: raw.float("verdict.majority")?,
        threads: raw.usize("threads")?.max(1),
    };
    spec.lot.validate().map_err(|e| CliError::Config(e.to_string()))?;
    spec.ppo.validate().map_err(|e| CliError::Config(e.to_string()))?;
    spec.teacher_model.spec_for(&spec.dataset).map_err(|e| CliError::Config(e.to_string()))?;
    spec.student_model.spec_for(&spec.dataset).map_err(|e| CliError::Config(e.to_string()))?;
    spec.policy_model.policy_spec(&spec.world).map_err(|e| CliError::Config(e.to_string()))?;

    raw.set("lot.lambdas", float_list(&lambdas))?;
    raw.set("ppo.lambdas", float_list(&ppo_lambdas))?;
    raw.set("lot.eval_every", Value::Integer(lot_cadence as i64))?;
    raw.set("ppo.eval_every", Value::Integer(ppo_cadence as i64))?;
    Ok(Resolved { master_seed: master, spec, raw })
}
