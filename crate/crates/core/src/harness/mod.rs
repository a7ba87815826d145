//! Multi-seed experiment recipes with aggregation, verdicts and run-directory output.

mod recipes;

use std::fmt::Write as _;
use std::path::Path;

use lot_autodiff::OptimizerConfig;
use serde_json::{json, Map, Value};

use crate::data::{gen_gaussian_split, gen_gaussian_unlabeled, gen_markov_split, gen_spirals, ClusterParams, LabeledDataset};
use crate::error::{config_err, Result};
use crate::metrics::{to_jsonl, MetricRecord};
use crate::model::{Activation, ModelSpec};
use crate::rl::{GridWorld, PpoConfig};
use crate::seed::derive_seed;
use crate::train::{BanConfig, LotConfig, Task};

pub use recipes::{
    hypothesis_replicate, hypothesis_verdict, run_alpha_sweep, run_compare, run_experiment, run_hypothesis,
    run_n_sweep, run_rl_compare, HypothesisReplicate,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    Hypothesis,
    AlphaSweep,
    NSweep,
    Compare,
    RlCompare,
}

impl Recipe {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hypothesis" => Some(Self::Hypothesis),
            "alpha_sweep" => Some(Self::AlphaSweep),
            "n_sweep" => Some(Self::NSweep),
            "compare" => Some(Self::Compare),
            "rl_compare" => Some(Self::RlCompare),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Hypothesis => "hypothesis",
            Self::AlphaSweep => "alpha_sweep",
            Self::NSweep => "n_sweep",
            Self::Compare => "compare",
            Self::RlCompare => "rl_compare",
        }
    }
}

/// A synthetic task generated afresh for every replicate seed.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Spirals {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        noise: f64,
    },
    Clusters {
        params: ClusterParams,
        test_per_class: usize,
        /// Size of an independently drawn `D_s`; `None` reuses the train inputs.
        student_pool: Option<usize>,
    },
    Markov {
        vocab: usize,
        train_len: usize,
        test_len: usize,
        concentration: f64,
        seq_len: usize,
    },
}

impl DatasetSpec {
    pub fn is_language(&self) -> bool {
        matches!(self, Self::Markov { .. })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Spirals { .. } => 2,
            Self::Clusters { params, .. } => params.dim,
            Self::Markov { vocab, .. } => *vocab,
        }
    }

    pub fn output_count(&self) -> usize {
        match self {
            Self::Spirals { classes, .. } => *classes,
            Self::Clusters { params, .. } => params.class_count,
            Self::Markov { vocab, .. } => *vocab,
        }
    }

    /// Labeled train and test sets of a classification task.
    pub fn split(&self, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            Self::Spirals {
                classes,
                per_class,
                test_per_class,
                noise,
            } => Ok((
                gen_spirals(*classes, *per_class, *noise, derive_seed(seed, "data/train"))?,
                gen_spirals(*classes, *test_per_class, *noise, derive_seed(seed, "data/test"))?,
            )),
            Self::Clusters {
                params, test_per_class, ..
            } => gen_gaussian_split(params, *test_per_class, seed),
            Self::Markov { .. } => config_err("a Markov corpus has no labeled split"),
        }
    }

    pub fn build(&self, seed: u64) -> Result<Task> {
        match self {
            Self::Markov {
                vocab,
                train_len,
                test_len,
                concentration,
                seq_len,
            } => {
                let (train, test) = gen_markov_split(*vocab, *train_len, *test_len, *concentration, seed)?;
                Task::language(&train, &test, *seq_len)
            }
            Self::Clusters {
                params,
                student_pool: Some(n),
                ..
            } => {
                let (train, test) = self.split(seed)?;
                let pool = gen_gaussian_unlabeled(params, *n, seed)?;
                Task::classification(train, pool, test)
            }
            _ => {
                let (train, test) = self.split(seed)?;
                let pool = train.unlabeled();
                Task::classification(train, pool, test)
            }
        }
    }
}

/// Layer widths shared by teacher or student networks; the family follows the task.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Truncation window of recurrent models.
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            window: 16,
        }
    }
}

impl ModelConfig {
    /// An MLP for classification, a recurrent model (first width only) for
    /// language, a policy network for the gridworld.
    pub fn spec_for(&self, dataset: &DatasetSpec) -> Result<ModelSpec> {
        let spec = match dataset {
            DatasetSpec::Markov { vocab, .. } => ModelSpec::Rnn {
                vocab: *vocab,
                hidden: self.hidden.first().copied().unwrap_or(64),
                window: self.window,
            },
            _ => ModelSpec::Mlp {
                input_dim: dataset.input_dim(),
                hidden: self.hidden.clone(),
                activation: self.activation,
                classes: dataset.output_count(),
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn policy_spec(&self, world: &GridWorld) -> Result<ModelSpec> {
        let spec = ModelSpec::PolicyValue {
            input_dim: world.feature_dim(),
            trunk: self.hidden.clone(),
            activation: self.activation,
            actions: crate::rl::ACTION_COUNT,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisConfig {
    /// Fraction of the train set seen by the deceptive teacher.
    pub subset_fraction: f64,
    /// Required test-accuracy lead of the sophisticated teacher, as a fraction.
    pub margin: f64,
    pub imitate_steps: u64,
    pub imitate_batch: usize,
    pub imitate_optim: OptimizerConfig,
    pub temperature: f64,
    pub eval_every: u64,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        Self {
            subset_fraction: 0.05,
            margin: 0.05,
            imitate_steps: 1000,
            imitate_batch: 32,
            imitate_optim: OptimizerConfig::sgd(0.02),
            temperature: 1.0,
            eval_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub recipe: Recipe,
    pub lot: LotConfig,
    pub ppo: PpoConfig,
    pub world: GridWorld,
    pub dataset: DatasetSpec,
    pub teacher_model: ModelConfig,
    pub student_model: ModelConfig,
    /// Teacher and student networks of the RL recipe.
    pub policy_model: ModelConfig,
    pub alpha_values: Vec<f64>,
    pub n_values: Vec<usize>,
    /// Replicate seeds; every run in a replicate derives its seeds from one.
    pub seeds: Vec<u64>,
    pub ban: BanConfig,
    pub hypothesis: HypothesisConfig,
    /// Fraction of seeds a per-seed assertion must hold in.
    pub majority: f64,
    /// Replicates run concurrently on up to this many threads.
    pub threads: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            recipe: Recipe::Compare,
            lot: LotConfig::default(),
            ppo: PpoConfig::default(),
            world: GridWorld::standard(0.1),
            dataset: DatasetSpec::Spirals {
                classes: 3,
                per_class: 100,
                test_per_class: 200,
                noise: 0.1,
            },
            teacher_model: ModelConfig::default(),
            student_model: ModelConfig::default(),
            policy_model: ModelConfig {
                activation: Activation::Tanh,
                ..ModelConfig::default()
            },
            alpha_values: vec![0.0, 0.25, 0.5, 1.0, 1.5, 1.7],
            n_values: vec![1, 2, 4, 5, 8],
            seeds: (0..5).map(|i| derive_seed(0, &format!("replicate/{i}"))).collect(),
            ban: BanConfig::default(),
            hypothesis: HypothesisConfig::default(),
            majority: 0.8,
            threads: 1,
        }
    }
}

impl ExperimentSpec {
    /// `count` replicate seeds derived from `master`.
    pub fn replicate_seeds(master: u64, count: usize) -> Vec<u64> {
        (0..count).map(|i| derive_seed(master, &format!("replicate/{i}"))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return config_err("at least one seed is required");
        }
        if !(self.majority > 0.0 && self.majority <= 1.0) {
            return config_err("majority must lie in (0, 1]");
        }
        for (i, a) in self.alpha_values.iter().enumerate() {
            if self.alpha_values[..i].contains(a) {
                return config_err(format!("duplicate alpha value {a}"));
            }
        }
        for (i, n) in self.n_values.iter().enumerate() {
            if self.n_values[..i].contains(n) {
                return config_err(format!("duplicate N value {n}"));
            }
        }
        self.lot.validate()?;
        match self.recipe {
            Recipe::AlphaSweep if !self.alpha_values.contains(&0.0) => {
                config_err("the alpha sweep must include 0")
            }
            Recipe::NSweep if !self.n_values.contains(&1) => config_err("the N sweep must include 1"),
            Recipe::Hypothesis if self.dataset.is_language() => {
                config_err("the hypothesis test needs a classification dataset")
            }
            Recipe::RlCompare => {
                self.ppo.validate()?;
                self.world.validate()
            }
            _ => Ok(()),
        }
    }

    /// Seeds needed by `ceil(majority · n)` of `n` replicates.
    pub fn required_seeds(&self) -> usize {
        ((self.majority * self.seeds.len() as f64) - 1e-9).ceil().max(1.0) as usize
    }
}

/// One named check with supporting numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct Assertion {
    pub name: String,
    pub pass: bool,
    /// Whether the overall verdict depends on it.
    pub required: bool,
    pub evidence: Value,
    pub warning: Option<String>,
}

impl Assertion {
    pub fn new(name: impl Into<String>, pass: bool, required: bool, evidence: Value) -> Self {
        Self {
            name: name.into(),
            pass,
            required,
            evidence,
            warning: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerdictStatus {
    Pass,
    Fail,
    /// A precondition failed, so the main claim was not tested.
    Inconclusive,
}

impl VerdictStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Pass => "pass",
            Self::Fail => "fail",
            Self::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub status: VerdictStatus,
    pub assertions: Vec<Assertion>,
}

impl Verdict {
    /// Pass iff every required assertion holds, unless `inconclusive`.
    pub fn from_assertions(assertions: Vec<Assertion>, inconclusive: bool) -> Self {
        let status = if inconclusive {
            VerdictStatus::Inconclusive
        } else if assertions.iter().filter(|a| a.required).all(|a| a.pass) {
            VerdictStatus::Pass
        } else {
            VerdictStatus::Fail
        };
        Self { status, assertions }
    }

    pub fn pass(&self) -> bool {
        self.status == VerdictStatus::Pass
    }

    pub fn get(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }

    /// Assertion name → `{pass, required, evidence}`, plus an `overall` entry.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        map.insert(
            "overall".into(),
            json!({ "pass": self.pass(), "evidence": { "status": self.status.as_str() } }),
        );
        for a in &self.assertions {
            let mut entry = json!({ "pass": a.pass, "required": a.required, "evidence": a.evidence });
            if let Some(w) = &a.warning {
                entry["warning"] = Value::String(w.clone());
            }
            map.insert(a.name.clone(), entry);
        }
        Value::Object(map)
    }
}

/// One value to summarize, tagged with its group.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub group: Vec<(String, String)>,
    pub metric: String,
    pub value: f64,
}

impl Observation {
    pub fn new(group: &[(&str, String)], metric: impl Into<String>, value: f64) -> Self {
        Self {
            group: group.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            metric: metric.into(),
            value,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub group: Vec<(String, String)>,
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl SummaryRow {
    pub fn group_value(&self, key: &str) -> Option<&str> {
        self.group.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Mean, population std, count, min and max per `(group, metric)`, in order
/// of first appearance.
pub fn aggregate(observations: &[Observation]) -> Result<Vec<SummaryRow>> {
    if observations.is_empty() {
        return config_err("nothing to aggregate");
    }
    let mut keys: Vec<(&[(String, String)], &str)> = Vec::new();
    for o in observations {
        let key = (o.group.as_slice(), o.metric.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    Ok(keys
        .into_iter()
        .map(|(group, metric)| {
            let values: Vec<f64> = observations
                .iter()
                .filter(|o| o.group == group && o.metric == metric)
                .map(|o| o.value)
                .collect();
            let (mean, std) = mean_std(&values);
            SummaryRow {
                group: group.to_vec(),
                metric: metric.to_string(),
                count: values.len(),
                mean,
                std,
                min: values.iter().copied().fold(f64::INFINITY, f64::min),
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect())
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("group,metric,count,mean,std,min,max\n");
    for r in rows {
        let group: Vec<String> = r.group.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            group.join(";"),
            r.metric,
            r.count,
            r.mean,
            r.std,
            r.min,
            r.max
        );
    }
    out
}

/// Final result of one run within a recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub role: String,
    /// Sweep value (α or N) if any.
    pub param: Option<f64>,
    /// Index into the spec's seed list.
    pub replicate: usize,
    /// Final test accuracy, perplexity, KL or return, per `metric`.
    pub value: f64,
    pub metric: String,
    /// Teacher plus student updates, or teacher environment steps for RL.
    pub budget_used: u64,
    pub teacher_updates: u64,
}

#[derive(Clone, Debug)]
pub struct RecipeOutput {
    pub recipe: Recipe,
    pub records: Vec<MetricRecord>,
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    pub verdict: Verdict,
}

impl RecipeOutput {
    pub fn metrics_jsonl(&self) -> String {
        to_jsonl(&self.records)
    }

    pub fn cells_for(&self, role: &str, param: Option<f64>) -> Vec<&CellResult> {
        self.cells.iter().filter(|c| c.role == role && c.param == param).collect()
    }
}

/// Writes `metrics.jsonl`, `summary.csv`, `verdict.json` and `config.resolved`.
pub fn write_outputs(dir: &Path, output: &RecipeOutput, resolved_config: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.jsonl"), output.metrics_jsonl())?;
    std::fs::write(dir.join("summary.csv"), summary_csv(&output.summary))?;
    let verdict = serde_json::to_string_pretty(&output.verdict.to_json())?;
    std::fs::write(dir.join("verdict.json"), verdict + "\n")?;
    std::fs::write(dir.join("config.resolved"), resolved_config)?;
    Ok(())
}
