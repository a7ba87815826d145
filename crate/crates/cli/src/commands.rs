//! Command dispatch and run-directory output.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use lot_core::harness::{aggregate, run_experiment, summary_csv, write_outputs, Observation, Recipe, RecipeOutput};
use lot_core::metrics::{to_jsonl, MetricRecord};
use lot_core::model::{load_checkpoint, save_checkpoint, Model, ModelSpec};
use lot_core::rl::{evaluate_policy, lot_ppo_train};
use lot_core::seed::derive_seed;
use lot_core::train::{ban_distill, count_updates, lot_train, teacher_only_train, Evaluation, TrainOutcome};
use serde_json::{json, Value};

use crate::config::Resolved;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    TeacherOnly,
    Ban,
    Hypothesis,
    SweepAlpha,
    SweepN,
    Compare,
    Rl,
    RlCompare,
    EvalCheckpoint,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::Train,
        Command::TeacherOnly,
        Command::Ban,
        Command::Hypothesis,
        Command::SweepAlpha,
        Command::SweepN,
        Command::Compare,
        Command::Rl,
        Command::RlCompare,
        Command::EvalCheckpoint,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::TeacherOnly => "teacher-only",
            Command::Ban => "ban",
            Command::Hypothesis => "hypothesis",
            Command::SweepAlpha => "sweep-alpha",
            Command::SweepN => "sweep-n",
            Command::Compare => "compare",
            Command::Rl => "rl",
            Command::RlCompare => "rl-compare",
            Command::EvalCheckpoint => "eval-checkpoint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    fn recipe(&self) -> Option<Recipe> {
        match self {
            Command::Hypothesis => Some(Recipe::Hypothesis),
            Command::SweepAlpha => Some(Recipe::AlphaSweep),
            Command::SweepN => Some(Recipe::NSweep),
            Command::Compare => Some(Recipe::Compare),
            Command::RlCompare => Some(Recipe::RlCompare),
            _ => None,
        }
    }
}

/// One fully resolved invocation.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub command: Command,
    pub config: Resolved,
    pub out_dir: PathBuf,
    pub force: bool,
    /// Required by `eval-checkpoint` only.
    pub checkpoint: Option<PathBuf>,
}

/// What a successful or verdict-failing command produced.
#[derive(Debug)]
pub struct Report {
    /// Present for recipes.
    pub recipe: Option<RecipeOutput>,
    /// Final metrics of single runs and checkpoint evaluations.
    pub metrics: Value,
}

/// The output directory must be absent or empty unless `force` is set.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Config(format!("{} exists and is not a directory", dir.display())));
        }
        let occupied = std::fs::read_dir(dir)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", dir.display())))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(CliError::Config(format!(
                "{} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::Run(e.into()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::Run(e.into()))
}

fn save_model(path: &Path, model: &Model) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::Run(e.into()))?;
    let mut w = BufWriter::new(file);
    save_checkpoint(&mut w, model)?;
    std::io::Write::flush(&mut w).map_err(|e| CliError::Run(e.into()))
}

fn eval_json(e: &Evaluation) -> Value {
    let mut v = json!({ "test_nll": e.nll });
    if let Some(a) = e.accuracy {
        v["test_accuracy"] = json!(a);
    }
    if let Some(p) = e.perplexity {
        v["test_perplexity"] = json!(p);
    }
    v
}

/// Writes the files of a single run: metric stream, final-metric summary,
/// resolved config and `final.json`.
fn write_single(dir: &Path, cfg: &Resolved, records: &[MetricRecord], finals: &[(&str, Value)]) -> Result<Value> {
    write_file(&dir.join("metrics.jsonl"), &to_jsonl(records))?;
    let mut obs = Vec::new();
    let mut metrics = serde_json::Map::new();
    for (role, values) in finals {
        if let Value::Object(map) = values {
            for (k, v) in map {
                if let Some(x) = v.as_f64() {
                    obs.push(Observation::new(&[("role", role.to_string())], k.clone(), x));
                }
            }
        }
        metrics.insert(role.to_string(), values.clone());
    }
    let metrics = Value::Object(metrics);
    write_file(&dir.join("summary.csv"), &summary_csv(&aggregate(&obs)?))?;
    write_file(&dir.join("config.resolved"), &cfg.render())?;
    write_file(
        &dir.join("final.json"),
        &(serde_json::to_string_pretty(&metrics).map_err(|e| CliError::Run(e.into()))? + "\n"),
    )?;
    Ok(metrics)
}

fn train_finals(out: &TrainOutcome) -> Value {
    let (t, s, total) = count_updates(&out.state);
    let mut v = eval_json(&out.final_eval);
    v["teacher_updates"] = json!(t);
    v["student_updates"] = json!(s);
    v["total_updates"] = json!(total);
    v
}

fn data_seed(master: u64) -> u64 {
    derive_seed(master, "data")
}

fn run_single(inv: &Invocation) -> Result<Report> {
    let cfg = &inv.config;
    let spec = &cfg.spec;
    let dir = &inv.out_dir;
    let metrics = match inv.command {
        Command::Train | Command::TeacherOnly | Command::Ban => {
            let task = spec.dataset.build(data_seed(cfg.master_seed))?;
            let tspec = spec.teacher_model.spec_for(&spec.dataset)?;
            match inv.command {
                Command::Train => {
                    let sspec = spec.student_model.spec_for(&spec.dataset)?;
                    let out = lot_train(&spec.lot, &task, &tspec, &sspec, "train")?;
                    save_model(&dir.join("teacher.ckpt"), &out.state.teacher)?;
                    write_single(dir, cfg, out.log.records(), &[("lot", train_finals(&out))])?
                }
                Command::TeacherOnly => {
                    let out = teacher_only_train(&spec.lot, &task, &tspec, "teacher-only")?;
                    save_model(&dir.join("teacher.ckpt"), &out.state.teacher)?;
                    write_single(dir, cfg, out.log.records(), &[("teacher_only", train_finals(&out))])?
                }
                _ => {
                    let to = teacher_only_train(&spec.lot, &task, &tspec, "ban/teacher")?;
                    let best = to.best.as_ref().map(|b| &b.model);
                    let ban = ban_distill(best, &tspec, &task, &spec.lot, &spec.ban, "ban/student")?;
                    save_model(&dir.join("teacher.ckpt"), &to.state.teacher)?;
                    save_model(&dir.join("student.ckpt"), &ban.state.teacher)?;
                    let mut records = to.log.records().to_vec();
                    records.extend(ban.log.records().iter().cloned());
                    write_single(
                        dir,
                        cfg,
                        &records,
                        &[("teacher_only", train_finals(&to)), ("ban", train_finals(&ban))],
                    )?
                }
            }
        }
        Command::Rl => {
            let pspec = spec.policy_model.policy_spec(&spec.world)?;
            let out = lot_ppo_train(&spec.ppo, &spec.world, &pspec, &pspec, "rl")?;
            save_model(&dir.join("teacher.ckpt"), &out.teacher)?;
            let finals = json!({
                "final_return": out.final_return,
                "env_steps": out.counters.teacher,
                "student_env_steps": out.counters.student,
                "ppo_updates": out.ppo_updates,
                "student_updates": out.student_updates,
            });
            write_single(dir, cfg, out.log.records(), &[("lot", finals)])?
        }
        _ => unreachable!("recipes and checkpoint evaluation are dispatched elsewhere"),
    };
    Ok(Report { recipe: None, metrics })
}

/// Evaluates a saved model on the configured task: the test split of the
/// dataset, or the gridworld for policy networks.
fn eval_checkpoint(inv: &Invocation) -> Result<Report> {
    let path = inv
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("eval-checkpoint needs --checkpoint".into()))?;
    let file = File::open(path).map_err(|e| CliError::Run(e.into()))?;
    let model = load_checkpoint(&mut BufReader::new(file))?;
    let cfg = &inv.config;
    let spec = &cfg.spec;
    let metrics = match &model.spec {
        ModelSpec::PolicyValue { .. } => {
            if model.spec.input_dim() != spec.world.feature_dim() {
                return Err(CliError::Config(format!(
                    "checkpoint expects {} state features, the map has {}",
                    model.spec.input_dim(),
                    spec.world.feature_dim()
                )));
            }
            let seed = derive_seed(spec.ppo.env_seed, "eval");
            let (mean, _) = evaluate_policy(&model, &spec.world, spec.ppo.eval_episodes, seed)?;
            json!({ "mean_return": mean, "episodes": spec.ppo.eval_episodes })
        }
        _ => {
            let (want_in, want_out) = (spec.dataset.input_dim(), spec.dataset.output_count());
            if model.spec.input_dim() != want_in || model.spec.output_count() != want_out {
                return Err(CliError::Config(format!(
                    "checkpoint maps {} inputs to {} outputs, the dataset has {want_in} and {want_out}",
                    model.spec.input_dim(),
                    model.spec.output_count()
                )));
            }
            let task = spec.dataset.build(data_seed(cfg.master_seed))?;
            eval_json(&task.evaluate(&model)?)
        }
    };
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| CliError::Run(e.into()))? + "\n";
    write_file(&inv.out_dir.join("eval.json"), &text)?;
    write_file(&inv.out_dir.join("config.resolved"), &cfg.render())?;
    Ok(Report { recipe: None, metrics })
}

/// Runs the command and writes its outputs. A recipe whose verdict does not
/// pass still writes everything and is reported through `dispatch`.
pub fn execute(inv: &Invocation) -> Result<Report> {
    if let Some(recipe) = inv.command.recipe() {
        let mut spec = inv.config.spec.clone();
        spec.recipe = recipe;
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        prepare_out_dir(&inv.out_dir, inv.force)?;
        let output = run_experiment(&spec)?;
        write_outputs(&inv.out_dir, &output, &inv.config.render())?;
        let metrics = output.verdict.to_json();
        return Ok(Report {
            recipe: Some(output),
            metrics,
        });
    }
    prepare_out_dir(&inv.out_dir, inv.force)?;
    match inv.command {
        Command::EvalCheckpoint => eval_checkpoint(inv),
        _ => run_single(inv),
    }
}

/// [`execute`], with a non-passing verdict turned into an error.
pub fn dispatch(inv: &Invocation) -> Result<Report> {
    let report = execute(inv)?;
    if let Some(out) = &report.recipe {
        if !out.verdict.pass() {
            return Err(CliError::Verdict(format!(
                "{} verdict is {}; see {}",
                out.recipe.as_str(),
                out.verdict.status.as_str(),
                inv.out_dir.join("verdict.json").display()
            )));
        }
    }
    Ok(report)
}
