use lot_autodiff::Tensor;
use serde_json::json;

use super::{
    aggregate, mean_std, Assertion, CellResult, ExperimentSpec, Observation, Recipe, RecipeOutput, Verdict,
};
use crate::data::subset;
use crate::error::{config_err, Result};
use crate::metrics::MetricRecord;
use crate::model::{init_model, Model, ModelSpec};
use crate::rl::{lot_ppo_train, ppo_train, RlOutcome};
use crate::seed::derive_seed;
use crate::train::{
    ban_distill, count_updates, imitate_only_train, lot_train, teacher_only_train, Evaluation, ImitateConfig,
    LotConfig, RunRole, RunSeeds, Task, TrainOutcome,
};

pub fn run_experiment(spec: &ExperimentSpec) -> Result<RecipeOutput> {
    match spec.recipe {
        Recipe::Hypothesis => run_hypothesis(spec),
        Recipe::AlphaSweep => run_alpha_sweep(spec),
        Recipe::NSweep => run_n_sweep(spec),
        Recipe::Compare => run_compare(spec),
        Recipe::RlCompare => run_rl_compare(spec),
    }
}

/// The base config with every run seed derived from the replicate seed.
fn replicate_lot(base: &LotConfig, seed: u64) -> LotConfig {
    let mut cfg = base.clone();
    cfg.seeds = RunSeeds::from_master(seed, cfg.student_count());
    cfg
}

fn data_seed(seed: u64) -> u64 {
    derive_seed(seed, "data")
}

/// Runs `f` once per replicate, on up to `spec.threads` threads. Results keep
/// seed order, so output does not depend on scheduling.
fn per_replicate<T: Send>(spec: &ExperimentSpec, f: impl Fn(usize, u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let n = spec.seeds.len();
    let threads = spec.threads.clamp(1, n.max(1));
    if threads == 1 {
        return spec.seeds.iter().enumerate().map(|(i, &s)| f(i, s)).collect();
    }
    let per = n.div_ceil(threads);
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (c, chunk) in slots.chunks_mut(per).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    let i = c * per + j;
                    *slot = Some(f(i, spec.seeds[i]));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every replicate ran")).collect()
}

/// `(metric name, value, score)` where a higher score is better.
fn final_metric(e: &Evaluation) -> (&'static str, f64, f64) {
    match (e.accuracy, e.perplexity) {
        (Some(a), _) => ("test_accuracy", a, a),
        (None, Some(p)) => ("test_perplexity", p, -p),
        _ => ("test_nll", e.nll, -e.nll),
    }
}

fn score_of(cell: &CellResult) -> f64 {
    if cell.metric == "test_perplexity" || cell.metric == "test_nll" {
        -cell.value
    } else {
        cell.value
    }
}

fn train_cell(out: &TrainOutcome, role: &str, param: Option<f64>, replicate: usize) -> CellResult {
    let (metric, value, _) = final_metric(&out.final_eval);
    let (teacher_updates, _, total) = count_updates(&out.state);
    CellResult {
        role: role.to_string(),
        param,
        replicate,
        value,
        metric: metric.to_string(),
        budget_used: total,
        teacher_updates,
    }
}

fn summarize(cells: &[CellResult]) -> Result<Vec<super::SummaryRow>> {
    let obs: Vec<Observation> = cells
        .iter()
        .map(|c| {
            let mut group = vec![("role", c.role.clone())];
            if let Some(p) = c.param {
                group.push(("param", p.to_string()));
            }
            Observation::new(&group, c.metric.clone(), c.value)
        })
        .collect();
    aggregate(&obs)
}

/// Mean score of the cells with this role and parameter.
fn mean_score(cells: &[CellResult], role: &str, param: Option<f64>) -> f64 {
    let scores: Vec<f64> = cells
        .iter()
        .filter(|c| c.role == role && c.param == param)
        .map(score_of)
        .collect();
    mean_std(&scores).0
}

fn budget_assertion(cells: &[CellResult]) -> Assertion {
    let budgets: Vec<u64> = cells.iter().map(|c| c.budget_used).collect();
    let same = budgets.windows(2).all(|w| w[0] == w[1]);
    Assertion::new("budget_invariance", same, true, json!({ "budgets": budgets }))
}

/// Both imitation runs of one replicate of the hypothesis test.
#[derive(Clone, Debug)]
pub struct HypothesisReplicate {
    pub sophisticated_accuracy: f64,
    pub deceptive_accuracy: f64,
    /// `(step, train KL, test KL)` of each student.
    pub sophisticated_curve: Vec<(u64, f64, f64)>,
    pub deceptive_curve: Vec<(u64, f64, f64)>,
    pub records: Vec<MetricRecord>,
}

impl HypothesisReplicate {
    pub fn accuracy_gap(&self) -> f64 {
        self.sophisticated_accuracy - self.deceptive_accuracy
    }

    fn last(curve: &[(u64, f64, f64)]) -> (u64, f64, f64) {
        *curve.last().expect("curves include step 0")
    }

    /// Both final train and test KL of the sophisticated student are lower.
    pub fn sophisticated_lower(&self) -> bool {
        let s = Self::last(&self.sophisticated_curve);
        let d = Self::last(&self.deceptive_curve);
        s.1 < d.1 && s.2 < d.2
    }

    /// First evaluated step at which the sophisticated student's train KL is
    /// at or below the deceptive student's final train KL.
    pub fn steps_to_threshold(&self) -> Option<u64> {
        let target = Self::last(&self.deceptive_curve).1;
        self.sophisticated_curve.iter().find(|c| c.1 <= target).map(|c| c.0)
    }
}

/// Trains two identically initialized students to imitate each frozen teacher
/// on the same inputs.
#[allow(clippy::too_many_arguments)]
pub fn hypothesis_replicate(
    sophisticated: &Model,
    deceptive: &Model,
    accuracies: (f64, f64),
    train_inputs: &Tensor,
    test_inputs: &Tensor,
    student_spec: &ModelSpec,
    student_seed: u64,
    cfg: &ImitateConfig,
    run_prefix: &str,
) -> Result<HypothesisReplicate> {
    let student = init_model(student_spec, student_seed)?;
    let soph = imitate_only_train(
        sophisticated,
        student.clone(),
        train_inputs,
        test_inputs,
        cfg,
        RunRole::ImitateSophisticated,
        &format!("{run_prefix}/sophisticated_student"),
    )?;
    let dec = imitate_only_train(
        deceptive,
        student,
        train_inputs,
        test_inputs,
        cfg,
        RunRole::ImitateDeceptive,
        &format!("{run_prefix}/deceptive_student"),
    )?;
    let mut records = soph.log.into_records();
    records.extend(dec.log.into_records());
    Ok(HypothesisReplicate {
        sophisticated_accuracy: accuracies.0,
        deceptive_accuracy: accuracies.1,
        sophisticated_curve: soph.curve,
        deceptive_curve: dec.curve,
        records,
    })
}

/// Inconclusive unless every replicate's teachers differ by `margin`; then
/// passes when the sophisticated student ends lower in at least `required`
/// replicates.
pub fn hypothesis_verdict(reps: &[HypothesisReplicate], margin: f64, required: usize) -> Verdict {
    let gaps: Vec<f64> = reps.iter().map(HypothesisReplicate::accuracy_gap).collect();
    // Accuracies are ratios of counts, so an exact tie with the margin may round low.
    let precondition = gaps.iter().all(|&g| g >= margin - 1e-9);
    let lower: Vec<bool> = reps.iter().map(HypothesisReplicate::sophisticated_lower).collect();
    let wins = lower.iter().filter(|&&b| b).count();
    let final_kl = |c: &[(u64, f64, f64)]| {
        let l = c.last().expect("curves include step 0");
        json!({ "train": l.1, "test": l.2 })
    };
    let thresholds: Vec<Option<u64>> = reps.iter().map(HypothesisReplicate::steps_to_threshold).collect();
    let faster: Vec<bool> = reps
        .iter()
        .zip(&thresholds)
        .map(|(r, t)| t.is_some_and(|s| s < HypothesisReplicate::last(&r.deceptive_curve).0))
        .collect();
    let assertions = vec![
        Assertion::new(
            "teacher_accuracy_gap",
            precondition,
            true,
            json!({
                "margin": margin,
                "sophisticated": reps.iter().map(|r| r.sophisticated_accuracy).collect::<Vec<_>>(),
                "deceptive": reps.iter().map(|r| r.deceptive_accuracy).collect::<Vec<_>>(),
                "gap": gaps,
            }),
        ),
        Assertion::new(
            "sophisticated_student_lower_kl",
            wins >= required,
            true,
            json!({
                "required_seeds": required,
                "passing_seeds": wins,
                "per_seed": lower,
                "sophisticated_final": reps.iter().map(|r| final_kl(&r.sophisticated_curve)).collect::<Vec<_>>(),
                "deceptive_final": reps.iter().map(|r| final_kl(&r.deceptive_curve)).collect::<Vec<_>>(),
            }),
        ),
        Assertion::new(
            "fewer_steps_to_threshold",
            faster.iter().filter(|&&b| b).count() >= required,
            false,
            json!({ "steps": thresholds, "per_seed": faster }),
        ),
    ];
    Verdict::from_assertions(assertions, !precondition)
}

/// Sophisticated teacher on the full train set, deceptive teacher with the
/// same budget and seeds on a small subset, then imitation of each by
/// identical students on the full train inputs.
pub fn run_hypothesis(spec: &ExperimentSpec) -> Result<RecipeOutput> {
    spec.validate()?;
    let h = &spec.hypothesis;
    if !(h.subset_fraction > 0.0 && h.subset_fraction <= 1.0) {
        return config_err("subset fraction must lie in (0, 1]");
    }
    let tspec = spec.teacher_model.spec_for(&spec.dataset)?;
    let sspec = spec.student_model.spec_for(&spec.dataset)?;
    let reps = per_replicate(spec, |i, seed| {
        let cfg = replicate_lot(&spec.lot, seed);
        let (train, test) = spec.dataset.split(data_seed(seed))?;
        let n_sub = ((h.subset_fraction * train.len() as f64).round() as usize).clamp(1, train.len());
        let small = subset(&train, n_sub, derive_seed(seed, "deceptive"))?;
        let full_task = Task::classification(train.clone(), train.unlabeled(), test.clone())?;
        let small_task = Task::classification(small.clone(), small.unlabeled(), test.clone())?;
        let prefix = format!("hypothesis/r{i}");
        let soph = teacher_only_train(&cfg, &full_task, &tspec, &format!("{prefix}/sophisticated_teacher"))?;
        let dec = teacher_only_train(&cfg, &small_task, &tspec, &format!("{prefix}/deceptive_teacher"))?;
        let accuracy = |o: &TrainOutcome| o.final_eval.accuracy.unwrap_or(f64::NAN);
        let icfg = ImitateConfig {
            steps: h.imitate_steps,
            batch: h.imitate_batch,
            optim: h.imitate_optim,
            temperature: h.temperature,
            eval_every: h.eval_every,
            order_seed: cfg.seeds.student_order,
        };
        let rep = hypothesis_replicate(
            &soph.state.teacher,
            &dec.state.teacher,
            (accuracy(&soph), accuracy(&dec)),
            &train.inputs,
            &test.inputs,
            &sspec,
            cfg.seeds.student_init[0],
            &icfg,
            &prefix,
        )?;
        let mut records = soph.log.into_records();
        records.extend(dec.log.into_records());
        Ok((rep, records))
    })?;
    let mut records = Vec::new();
    let mut cells = Vec::new();
    let mut replicates = Vec::new();
    for (i, (mut rep, teacher_records)) in reps.into_iter().enumerate() {
        records.extend(teacher_records);
        records.append(&mut rep.records);
        let budget = spec.lot.total_update_budget;
        let mut cell = |role: &str, metric: &str, value: f64, teacher_updates: u64| {
            cells.push(CellResult {
                role: role.into(),
                param: None,
                replicate: i,
                value,
                metric: metric.into(),
                budget_used: teacher_updates,
                teacher_updates,
            })
        };
        cell("sophisticated_teacher", "test_accuracy", rep.sophisticated_accuracy, budget);
        cell("deceptive_teacher", "test_accuracy", rep.deceptive_accuracy, budget);
        let s = HypothesisReplicate::last(&rep.sophisticated_curve);
        let d = HypothesisReplicate::last(&rep.deceptive_curve);
        cell("sophisticated_student", "final_train_kl", s.1, 0);
        cell("sophisticated_student", "final_test_kl", s.2, 0);
        cell("deceptive_student", "final_train_kl", d.1, 0);
        cell("deceptive_student", "final_test_kl", d.2, 0);
        replicates.push(rep);
    }
    let verdict = hypothesis_verdict(&replicates, h.margin, spec.required_seeds());
    Ok(RecipeOutput {
        recipe: Recipe::Hypothesis,
        records,
        summary: summarize(&cells)?,
        cells,
        verdict,
    })
}

fn same_trajectory(a: &TrainOutcome, b: &TrainOutcome) -> bool {
    a.state.teacher == b.state.teacher
        && ["test_accuracy", "test_perplexity", "test_nll", "train_loss"]
            .iter()
            .all(|m| a.log.series(m) == b.log.series(m))
}

/// One `lot_train` per (α, seed) under a fixed budget. The α = 0 cells run
/// with `N = 0`, which is Teacher-only training, and are checked against
/// `teacher_only_train` bit for bit.
pub fn run_alpha_sweep(spec: &ExperimentSpec) -> Result<RecipeOutput> {
    spec.validate()?;
    if !spec.alpha_values.contains(&0.0) {
        return config_err("the alpha sweep must include 0");
    }
    let tspec = spec.teacher_model.spec_for(&spec.dataset)?;
    let sspec = spec.student_model.spec_for(&spec.dataset)?;
    let results = per_replicate(spec, |i, seed| {
        let cfg = replicate_lot(&spec.lot, seed);
        let task = spec.dataset.build(data_seed(seed))?;
        let mut cells = Vec::new();
        let mut records = Vec::new();
        let mut zero = None;
        for &alpha in &spec.alpha_values {
            let mut c = cfg.clone();
            c.alpha = alpha;
            if alpha == 0.0 {
                c.student_steps = 0;
            }
            let out = lot_train(&c, &task, &tspec, &sspec, &format!("alpha_sweep/r{i}/alpha={alpha}"))?;
            cells.push(train_cell(&out, "lot", Some(alpha), i));
            records.extend(out.log.records().iter().cloned());
            if alpha == 0.0 {
                zero = Some(out);
            }
        }
        let reference = teacher_only_train(&cfg, &task, &tspec, &format!("alpha_sweep/r{i}/teacher_only"))?;
        let matches = zero.as_ref().is_some_and(|z| same_trajectory(z, &reference));
        records.extend(reference.log.into_records());
        Ok((cells, records, matches))
    })?;
    let mut cells = Vec::new();
    let mut records = Vec::new();
    let mut matches = Vec::new();
    for (c, r, m) in results {
        cells.extend(c);
        records.extend(r);
        matches.push(m);
    }
    let means: Vec<(f64, f64)> = spec
        .alpha_values
        .iter()
        .map(|&a| (a, mean_score(&cells, "lot", Some(a))))
        .collect();
    let zero_mean = mean_score(&cells, "lot", Some(0.0));
    let best = means
        .iter()
        .filter(|(a, _)| *a != 0.0)
        .copied()
        .fold(None, |acc: Option<(f64, f64)>, m| match acc {
            Some(b) if b.1 >= m.1 => Some(b),
            _ => Some(m),
        });
    let best_ok = best.is_some_and(|b| b.1 >= zero_mean);
    let assertions = vec![
        budget_assertion(&cells),
        Assertion::new(
            "alpha0_equals_teacher_only",
            matches.iter().all(|&m| m),
            true,
            json!({ "per_seed": matches }),
        ),
        Assertion::new(
            "best_alpha_at_least_alpha0",
            best_ok,
            true,
            json!({
                "mean_score_by_alpha": means.iter().map(|(a, m)| json!({ "alpha": a, "mean_score": m })).collect::<Vec<_>>(),
                "best_alpha": best.map(|b| b.0),
                "alpha0_mean_score": zero_mean,
            }),
        ),
    ];
    Ok(RecipeOutput {
        recipe: Recipe::AlphaSweep,
        records,
        summary: summarize(&cells)?,
        cells,
        verdict: Verdict::from_assertions(assertions, false),
    })
}

/// One `lot_train` per (N, seed) at the base α under the same total budget,
/// plus an α = 0 baseline.
pub fn run_n_sweep(spec: &ExperimentSpec) -> Result<RecipeOutput> {
    spec.validate()?;
    if !spec.n_values.contains(&1) {
        return config_err("the N sweep must include 1");
    }
    let tspec = spec.teacher_model.spec_for(&spec.dataset)?;
    let sspec = spec.student_model.spec_for(&spec.dataset)?;
    let results = per_replicate(spec, |i, seed| {
        let cfg = replicate_lot(&spec.lot, seed);
        let task = spec.dataset.build(data_seed(seed))?;
        let mut cells = Vec::new();
        let mut records = Vec::new();
        let mut base = cfg.clone();
        base.alpha = 0.0;
        base.student_steps = 0;
        let out = lot_train(&base, &task, &tspec, &sspec, &format!("n_sweep/r{i}/baseline"))?;
        cells.push(train_cell(&out, "baseline", None, i));
        records.extend(out.log.into_records());
        for &n in &spec.n_values {
            let mut c = cfg.clone();
            c.student_steps = n;
            let out = lot_train(&c, &task, &tspec, &sspec, &format!("n_sweep/r{i}/n={n}"))?;
            cells.push(train_cell(&out, "lot", Some(n as f64), i));
            records.extend(out.log.into_records());
        }
        Ok((cells, records))
    })?;
    let (mut cells, mut records) = (Vec::new(), Vec::new());
    for (c, r) in results {
        cells.extend(c);
        records.extend(r);
    }
    let baseline = mean_score(&cells, "baseline", None);
    let means: Vec<(usize, f64)> = spec
        .n_values
        .iter()
        .map(|&n| (n, mean_score(&cells, "lot", Some(n as f64))))
        .collect();
    let degenerate: Vec<usize> = spec
        .n_values
        .iter()
        .copied()
        .filter(|&n| {
            cells
                .iter()
                .any(|c| c.param == Some(n as f64) && c.teacher_updates < 10)
        })
        .collect();
    let mut summary = summarize(&cells)?;
    let degenerate_obs: Vec<Observation> = cells
        .iter()
        .filter(|c| c.role == "lot")
        .map(|c| {
            Observation::new(
                &[("role", c.role.clone()), ("param", c.param.unwrap_or(0.0).to_string())],
                "degenerate",
                f64::from(u8::from(c.teacher_updates < 10)),
            )
        })
        .collect();
    summary.extend(aggregate(&degenerate_obs)?);
    let assertions = vec![
        budget_assertion(&cells),
        Assertion::new(
            "some_n_beats_baseline",
            means.iter().any(|(_, m)| *m > baseline),
            true,
            json!({
                "baseline_mean_score": baseline,
                "mean_score_by_n": means.iter().map(|(n, m)| json!({ "n": n, "mean_score": m })).collect::<Vec<_>>(),
                "degenerate_n": degenerate,
            }),
        ),
    ];
    Ok(RecipeOutput {
        recipe: Recipe::NSweep,
        records,
        summary,
        cells,
        verdict: Verdict::from_assertions(assertions, false),
    })
}

/// Teacher-only, BAN and LoT per seed under one total update budget. BAN
/// distils the best Teacher-only checkpoint into a student of the teacher's
/// shape.
pub fn run_compare(spec: &ExperimentSpec) -> Result<RecipeOutput> {
    spec.validate()?;
    let tspec = spec.teacher_model.spec_for(&spec.dataset)?;
    let sspec = spec.student_model.spec_for(&spec.dataset)?;
    let results = per_replicate(spec, |i, seed| {
        let cfg = replicate_lot(&spec.lot, seed);
        let task = spec.dataset.build(data_seed(seed))?;
        let prefix = format!("compare/r{i}");
        let to = teacher_only_train(&cfg, &task, &tspec, &format!("{prefix}/teacher_only"))?;
        let best = to.best.as_ref().map(|b| &b.model);
        let ban = ban_distill(best, &tspec, &task, &cfg, &spec.ban, &format!("{prefix}/ban"))?;
        let lot = lot_train(&cfg, &task, &tspec, &sspec, &format!("{prefix}/lot"))?;
        let cells = vec![
            train_cell(&to, "teacher_only", None, i),
            train_cell(&ban, "ban", None, i),
            train_cell(&lot, "lot", None, i),
        ];
        let mut records = to.log.into_records();
        records.extend(ban.log.into_records());
        records.extend(lot.log.into_records());
        Ok((cells, records, task.entropy()))
    })?;
    let (mut cells, mut records, mut entropies) = (Vec::new(), Vec::new(), Vec::new());
    for (c, r, h) in results {
        cells.extend(c);
        records.extend(r);
        entropies.push(h);
    }
    let (to, ban, lot) = (
        mean_score(&cells, "teacher_only", None),
        mean_score(&cells, "ban", None),
        mean_score(&cells, "lot", None),
    );
    let per_seed_wins = (0..spec.seeds.len())
        .filter(|&i| {
            let s = |role: &str| score_of(cells.iter().find(|c| c.role == role && c.replicate == i).expect("cell"));
            s("lot") > s("teacher_only")
        })
        .count();
    let mut assertions = vec![
        budget_assertion(&cells),
        Assertion::new(
            "lot_beats_teacher_only",
            lot > to,
            true,
            json!({ "lot_mean_score": lot, "teacher_only_mean_score": to, "seeds_lot_ahead": per_seed_wins }),
        ),
        Assertion::new(
            "ordering_lot_ban_teacher_only",
            lot >= ban && ban >= to,
            false,
            json!({ "lot": lot, "ban": ban, "teacher_only": to }),
        ),
    ];
    if spec.dataset.is_language() {
        assertions.push(perplexity_floor(&records, &cells, &entropies));
    }
    Ok(RecipeOutput {
        recipe: Recipe::Compare,
        records,
        summary: summarize(&cells)?,
        cells,
        verdict: Verdict::from_assertions(assertions, false),
    })
}

/// Every recorded test perplexity of replicate `i` is at least `exp(H_i) − 1e-6`.
fn perplexity_floor(records: &[MetricRecord], cells: &[CellResult], entropies: &[Option<f64>]) -> Assertion {
    let mut violations = Vec::new();
    let mut lowest = f64::INFINITY;
    for r in records.iter().filter(|r| r.name == "test_perplexity") {
        let Some(i) = r
            .run_id
            .strip_prefix("compare/r")
            .and_then(|rest| rest.split('/').next())
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        let floor = entropies.get(i).copied().flatten().map_or(0.0, f64::exp);
        lowest = lowest.min(r.value - floor);
        if r.value < floor - 1e-6 {
            violations.push(json!({ "run_id": r.run_id, "step": r.step, "value": r.value, "floor": floor }));
        }
    }
    let floors: Vec<Option<f64>> = entropies.iter().map(|h| h.map(f64::exp)).collect();
    let finals: Vec<f64> = cells.iter().map(|c| c.value).collect();
    Assertion::new(
        "perplexity_floor",
        violations.is_empty(),
        true,
        json!({ "floors": floors, "min_margin": lowest, "final_values": finals, "violations": violations }),
    )
}

/// Plain PPO and PPO with students on matched seeds and step budgets.
pub fn run_rl_compare(spec: &ExperimentSpec) -> Result<RecipeOutput> {
    spec.validate()?;
    let pspec = spec.policy_model.policy_spec(&spec.world)?;
    let results = per_replicate(spec, |i, seed| {
        let mut cfg = spec.ppo.clone();
        cfg.lot.seeds = RunSeeds::from_master(seed, cfg.lot.student_count());
        cfg.env_seed = derive_seed(seed, "env");
        let prefix = format!("rl_compare/r{i}");
        let to = ppo_train(&cfg, &spec.world, &pspec, &format!("{prefix}/teacher_only"))?;
        let lot = lot_ppo_train(&cfg, &spec.world, &pspec, &pspec, &format!("{prefix}/lot"))?;
        Ok((to, lot))
    })?;
    let mut cells = Vec::new();
    let mut records = Vec::new();
    let mut parity = Vec::new();
    let mut student_steps = Vec::new();
    let rl_cell = |o: &RlOutcome, role: &str, i: usize| CellResult {
        role: role.into(),
        param: None,
        replicate: i,
        value: o.final_return,
        metric: "final_return".into(),
        budget_used: o.counters.teacher,
        teacher_updates: o.ppo_updates,
    };
    for (i, (to, lot)) in results.into_iter().enumerate() {
        parity.push(json!({ "teacher_only": to.counters.teacher, "lot": lot.counters.teacher }));
        student_steps.push(lot.counters.student + to.counters.student);
        cells.push(rl_cell(&to, "teacher_only", i));
        cells.push(rl_cell(&lot, "lot", i));
        records.extend(to.log.into_records());
        records.extend(lot.log.into_records());
    }
    let returns = |role: &str| -> Vec<f64> { cells.iter().filter(|c| c.role == role).map(|c| c.value).collect() };
    let (r_to, r_lot) = (returns("teacher_only"), returns("lot"));
    let n = r_to.len() as f64;
    let (m_to, m_lot) = (mean_std(&r_to).0, mean_std(&r_lot).0);
    let sample_var = |v: &[f64], m: f64| {
        if v.len() < 2 {
            0.0
        } else {
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
        }
    };
    let pooled_se = ((sample_var(&r_to, m_to) + sample_var(&r_lot, m_lot)) / n).sqrt();
    let diff = m_lot - m_to;
    let mut ret = Assertion::new(
        "lot_return_at_least_teacher_only",
        diff >= -pooled_se,
        true,
        json!({ "lot_mean": m_lot, "teacher_only_mean": m_to, "difference": diff, "pooled_standard_error": pooled_se }),
    );
    if diff < 0.0 && diff >= -pooled_se {
        ret.warning = Some(format!(
            "LoT mean return trails Teacher-only by {:.4}, within one pooled standard error ({pooled_se:.4})",
            -diff
        ));
    }
    let same_steps = cells.chunks(2).all(|p| p[0].budget_used == p[1].budget_used)
        && cells.iter().all(|c| c.budget_used == spec.ppo.total_env_steps);
    let assertions = vec![
        Assertion::new("env_step_parity", same_steps, true, json!({ "per_seed": parity })),
        Assertion::new(
            "students_never_step",
            student_steps.iter().all(|&s| s == 0),
            true,
            json!({ "student_env_steps": student_steps }),
        ),
        ret,
    ];
    Ok(RecipeOutput {
        recipe: Recipe::RlCompare,
        records,
        summary: summarize(&cells)?,
        cells,
        verdict: Verdict::from_assertions(assertions, false),
    })
}
