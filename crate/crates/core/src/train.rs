//! Imitability, the teacher regularizer, teacher and student losses, the
//! interleaved teacher/student loop and its baselines.

use lot_autodiff::{optimizer_step, OptimizerConfig, OptimizerState, Tape, Tensor, Var};

use crate::data::{BatchIterator, LabeledDataset, TextCorpus, UnlabeledDataset};
use crate::error::{config_err, data_err, Result};
use crate::metrics::MetricLog;
use crate::model::{
    argmax_rows, forward_classifier, forward_policy_logits, forward_rnn, init_model, BoundModel, Model, ModelSpec,
};
use crate::seed::SeedTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    Kl,
    L2,
}

impl MetricKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "kl" => Some(Self::Kl),
            "l2" => Some(Self::L2),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Kl => "kl",
            Self::L2 => "l2",
        }
    }
}

/// Which KL the teacher regularizer uses. `Literal` is `KL(p_t ‖ p_s)`;
/// `StudentFirst` uses `KL(p_s ‖ p_t)`, the same direction as the student loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlDirection {
    Literal,
    StudentFirst,
}

impl KlDirection {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "literal" => Some(Self::Literal),
            "student_first" => Some(Self::StudentFirst),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Literal => "literal",
            Self::StudentFirst => "student_first",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RunRole {
    Lot,
    TeacherOnly,
    Ban,
    ImitateSophisticated,
    ImitateDeceptive,
}

impl RunRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Lot => "lot",
            Self::TeacherOnly => "teacher_only",
            Self::Ban => "ban",
            Self::ImitateSophisticated => "imitate_sophisticated",
            Self::ImitateDeceptive => "imitate_deceptive",
        }
    }
}

/// Seeds of one run, derived from a master seed under the labels
/// `teacher/init`, `student/{i}/init`, `data/order/teacher` and
/// `data/order/student`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub teacher_init: u64,
    pub student_init: Vec<u64>,
    pub teacher_order: u64,
    pub student_order: u64,
}

impl RunSeeds {
    pub fn from_master(master: u64, students: usize) -> Self {
        let tree = SeedTree::new(master);
        Self {
            teacher_init: tree.derive("teacher/init"),
            student_init: (0..students).map(|i| tree.derive(&format!("student/{i}/init"))).collect(),
            teacher_order: tree.derive("data/order/teacher"),
            student_order: tree.derive("data/order/student"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LotConfig {
    pub alpha: f64,
    /// Student steps per teacher step (`N`).
    pub student_steps: usize,
    pub lambdas: Vec<f64>,
    pub temperature: f64,
    pub metric: MetricKind,
    pub direction: KlDirection,
    pub teacher_optim: OptimizerConfig,
    pub student_optim: OptimizerConfig,
    /// Teacher plus student updates.
    pub total_update_budget: u64,
    pub teacher_batch: usize,
    pub student_batch: usize,
    pub seeds: RunSeeds,
    /// Teacher updates between evaluations; `None` means `max(1, budget / 200)`.
    pub eval_every: Option<u64>,
}

impl Default for LotConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            student_steps: 1,
            lambdas: vec![1.0],
            temperature: 1.5,
            metric: MetricKind::Kl,
            direction: KlDirection::Literal,
            teacher_optim: OptimizerConfig::sgd(0.02),
            student_optim: OptimizerConfig::sgd(0.02),
            total_update_budget: 2000,
            teacher_batch: 32,
            student_batch: 32,
            seeds: RunSeeds::from_master(0, 1),
            eval_every: None,
        }
    }
}

impl LotConfig {
    pub fn student_count(&self) -> usize {
        self.lambdas.len()
    }

    /// Uniform weights `1/K` for `k` students and matching seeds.
    pub fn with_students(mut self, k: usize, master: u64) -> Self {
        self.lambdas = vec![1.0 / k as f64; k];
        self.seeds = RunSeeds::from_master(master, k);
        self
    }

    pub fn eval_cadence(&self) -> u64 {
        self.eval_every.unwrap_or((self.total_update_budget / 200).max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return config_err(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return config_err(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.lambdas.is_empty() {
            return config_err("at least one student is required");
        }
        if self.lambdas.iter().any(|&l| !(l >= 0.0)) {
            return config_err("lambdas must be non-negative");
        }
        let total: f64 = self.lambdas.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return config_err(format!("lambdas must sum to 1, got {total}"));
        }
        if self.seeds.student_init.len() != self.lambdas.len() {
            return config_err(format!(
                "{} student seeds for {} students",
                self.seeds.student_init.len(),
                self.lambdas.len()
            ));
        }
        if self.teacher_batch == 0 || self.student_batch == 0 {
            return config_err("batch sizes must be positive");
        }
        self.teacher_optim.validate()?;
        self.student_optim.validate()?;
        Ok(())
    }
}

/// Inputs of one batch, in the form the model family expects.
#[derive(Clone, Debug)]
pub enum BatchInputs {
    Features(Tensor),
    /// Equal-length input token sequences.
    Sequences(Vec<Vec<usize>>),
}

#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub inputs: BatchInputs,
    /// Row-aligned with the logits the model produces for `inputs`.
    pub targets: Vec<usize>,
}

/// Logits of `net` on `inputs`: `[batch, classes]` for features (action
/// logits for policy networks) and
/// `[len · batch, vocab]` (position-major) for sequences.
pub fn model_logits(tape: &mut Tape, net: &BoundModel, inputs: &BatchInputs) -> Result<Var> {
    match inputs {
        BatchInputs::Features(x) => {
            let x = tape.constant(x.clone());
            match net.spec {
                ModelSpec::PolicyValue { .. } => forward_policy_logits(tape, net, x),
                _ => forward_classifier(tape, net, x),
            }
        }
        BatchInputs::Sequences(seqs) => {
            let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
            forward_rnn(tape, net, &refs)
        }
    }
}

#[derive(Clone, Debug)]
enum Examples {
    Classification {
        train: LabeledDataset,
        student: UnlabeledDataset,
        test: LabeledDataset,
    },
    Language {
        /// Windows of `seq_len + 1` tokens.
        train: Vec<Vec<usize>>,
        test: Vec<Vec<usize>>,
        vocab: usize,
        entropy: f64,
    },
}

/// A supervised task: labeled `D_t`, unlabeled `D_s` and a held-out test set.
#[derive(Clone, Debug)]
pub struct Task {
    examples: Examples,
}

/// Held-out metrics of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub nll: f64,
    pub accuracy: Option<f64>,
    pub perplexity: Option<f64>,
}

impl Evaluation {
    /// Higher is better: accuracy, or negative perplexity.
    pub fn score(&self) -> f64 {
        match (self.accuracy, self.perplexity) {
            (Some(a), _) => a,
            (None, Some(p)) => -p,
            (None, None) => -self.nll,
        }
    }
}

impl Task {
    pub fn classification(train: LabeledDataset, student: UnlabeledDataset, test: LabeledDataset) -> Result<Self> {
        if train.dim() != student.dim() || train.dim() != test.dim() {
            return data_err("train, student and test inputs must share a dimension");
        }
        if train.class_count != test.class_count {
            return data_err("train and test class counts differ");
        }
        Ok(Self {
            examples: Examples::Classification { train, student, test },
        })
    }

    /// `D_s` is the training windows with their targets dropped.
    pub fn language(train: &TextCorpus, test: &TextCorpus, seq_len: usize) -> Result<Self> {
        if train.vocab_size() != test.vocab_size() {
            return data_err("train and test vocabularies differ");
        }
        let (tr, te) = (train.windows(seq_len), test.windows(seq_len));
        if tr.is_empty() || te.is_empty() {
            return data_err("corpus too short for the sequence length");
        }
        Ok(Self {
            examples: Examples::Language {
                train: tr,
                test: te,
                vocab: train.vocab_size(),
                entropy: train.entropy(),
            },
        })
    }

    pub fn output_count(&self) -> usize {
        match &self.examples {
            Examples::Classification { train, .. } => train.class_count,
            Examples::Language { vocab, .. } => *vocab,
        }
    }

    /// Source entropy of a language task, the floor of achievable test NLL.
    pub fn entropy(&self) -> Option<f64> {
        match &self.examples {
            Examples::Language { entropy, .. } => Some(*entropy),
            Examples::Classification { .. } => None,
        }
    }

    pub fn teacher_len(&self) -> usize {
        match &self.examples {
            Examples::Classification { train, .. } => train.len(),
            Examples::Language { train, .. } => train.len(),
        }
    }

    pub fn student_len(&self) -> usize {
        match &self.examples {
            Examples::Classification { student, .. } => student.len(),
            Examples::Language { train, .. } => train.len(),
        }
    }

    pub fn labeled_batch(&self, indices: &[usize]) -> LabeledBatch {
        match &self.examples {
            Examples::Classification { train, .. } => {
                let (x, y) = train.gather(indices);
                LabeledBatch {
                    inputs: BatchInputs::Features(x),
                    targets: y,
                }
            }
            Examples::Language { train, .. } => sequence_batch(train, indices),
        }
    }

    pub fn student_batch(&self, indices: &[usize]) -> BatchInputs {
        match &self.examples {
            Examples::Classification { student, .. } => BatchInputs::Features(student.gather(indices)),
            Examples::Language { train, .. } => sequence_batch(train, indices).inputs,
        }
    }

    fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        let ok = match (&self.examples, spec) {
            (Examples::Classification { train, .. }, ModelSpec::Mlp { input_dim, classes, .. }) => {
                *input_dim == train.dim() && *classes == train.class_count
            }
            (Examples::Language { vocab, .. }, ModelSpec::Rnn { vocab: v, .. }) => v == vocab,
            _ => false,
        };
        if !ok {
            return config_err(format!("model spec {spec:?} does not fit the task"));
        }
        Ok(())
    }

    pub fn evaluate(&self, model: &Model) -> Result<Evaluation> {
        match &self.examples {
            Examples::Classification { test, .. } => evaluate_labeled(model, test),
            Examples::Language { test, .. } => {
                let mut total = 0.0;
                let mut count = 0usize;
                for chunk in test.chunks(64) {
                    let idx: Vec<usize> = (0..chunk.len()).collect();
                    let batch = sequence_batch(chunk, &idx);
                    let mut tape = Tape::new();
                    let net = model.bind(&mut tape, false);
                    let logits = model_logits(&mut tape, &net, &batch.inputs)?;
                    let lp = tape.log_softmax_temp(logits, 1.0)?;
                    let nll = tape.nll_loss(lp, &batch.targets)?;
                    total += tape.value(nll).item() * batch.targets.len() as f64;
                    count += batch.targets.len();
                }
                let nll = total / count as f64;
                Ok(Evaluation {
                    nll,
                    accuracy: None,
                    perplexity: Some(nll.exp()),
                })
            }
        }
    }
}

/// Accuracy and mean NLL of a classifier on a labeled set.
pub fn evaluate_labeled(model: &Model, data: &LabeledDataset) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let net = model.bind(&mut tape, false);
    let x = tape.constant(data.inputs.clone());
    let logits = forward_classifier(&mut tape, &net, x)?;
    let lp = tape.log_softmax_temp(logits, 1.0)?;
    let nll = tape.nll_loss(lp, &data.labels)?;
    let pred = argmax_rows(tape.value(logits));
    let correct = pred.iter().zip(&data.labels).filter(|(a, b)| a == b).count();
    Ok(Evaluation {
        nll: tape.value(nll).item(),
        accuracy: Some(correct as f64 / data.len() as f64),
        perplexity: None,
    })
}

fn sequence_batch(windows: &[Vec<usize>], indices: &[usize]) -> LabeledBatch {
    let len = windows[0].len() - 1;
    let inputs: Vec<Vec<usize>> = indices.iter().map(|&i| windows[i][..len].to_vec()).collect();
    let mut targets = Vec::with_capacity(len * indices.len());
    for t in 0..len {
        for &i in indices {
            targets.push(windows[i][t + 1]);
        }
    }
    LabeledBatch {
        inputs: BatchInputs::Sequences(inputs),
        targets,
    }
}

/// `μ_{a,b}`: `KL(p_a ‖ p_b)` or the squared distance between `p_a` and
/// `p_b`, with both distributions taken at `temperature` and averaged over rows.
pub fn imitability(tape: &mut Tape, kind: MetricKind, logits_a: Var, logits_b: Var, temperature: f64) -> Result<Var> {
    Ok(match kind {
        MetricKind::Kl => tape.kl_logits(logits_a, logits_b, temperature)?,
        MetricKind::L2 => {
            let pa = tape.softmax_temp(logits_a, temperature)?;
            let pb = tape.softmax_temp(logits_b, temperature)?;
            tape.l2_distance(pa, pb)?
        }
    })
}

/// `α Σ_i λ_i μ_{t,s_i}` from precomputed logits. Student logits are detached
/// so gradients reach only the teacher. Returns the regularizer and each `μ`.
pub fn regularizer_from_logits(
    tape: &mut Tape,
    teacher_logits: Var,
    student_logits: &[Var],
    cfg: &LotConfig,
) -> Result<(Var, Vec<f64>)> {
    if student_logits.len() != cfg.lambdas.len() {
        return config_err(format!(
            "{} students but {} lambdas",
            student_logits.len(),
            cfg.lambdas.len()
        ));
    }
    let mut total: Option<Var> = None;
    let mut mus = Vec::with_capacity(student_logits.len());
    for (&s, &lambda) in student_logits.iter().zip(&cfg.lambdas) {
        let s = tape.detach(s)?;
        let mu = match (cfg.metric, cfg.direction) {
            (MetricKind::Kl, KlDirection::StudentFirst) => imitability(tape, cfg.metric, s, teacher_logits, cfg.temperature)?,
            _ => imitability(tape, cfg.metric, teacher_logits, s, cfg.temperature)?,
        };
        mus.push(tape.value(mu).item());
        let term = tape.scale(mu, lambda)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let total = total.expect("at least one student");
    Ok((tape.scale(total, cfg.alpha)?, mus))
}

/// The regularizer `R(θ)` on an unlabeled batch.
pub fn lot_regularizer(
    tape: &mut Tape,
    teacher: &BoundModel,
    students: &[BoundModel],
    inputs: &BatchInputs,
    cfg: &LotConfig,
) -> Result<(Var, Vec<f64>)> {
    let t = model_logits(tape, teacher, inputs)?;
    let s = students
        .iter()
        .map(|net| model_logits(tape, net, inputs))
        .collect::<Result<Vec<_>>>()?;
    regularizer_from_logits(tape, t, &s, cfg)
}

/// Components of the teacher objective.
#[derive(Clone, Debug)]
pub struct TeacherLoss {
    pub total: Var,
    pub nll: Var,
    pub regularizer: Var,
    /// `μ_{t,s_i}` per student.
    pub mu: Vec<f64>,
}

/// `NLL(B_t) + R(θ)` on `B_s`.
pub fn teacher_loss(
    tape: &mut Tape,
    teacher: &BoundModel,
    students: &[BoundModel],
    bt: &LabeledBatch,
    bs: &BatchInputs,
    cfg: &LotConfig,
) -> Result<TeacherLoss> {
    let logits = model_logits(tape, teacher, &bt.inputs)?;
    let lp = tape.log_softmax_temp(logits, 1.0)?;
    let nll = tape.nll_loss(lp, &bt.targets)?;
    let (regularizer, mu) = lot_regularizer(tape, teacher, students, bs, cfg)?;
    let total = tape.add(nll, regularizer)?;
    Ok(TeacherLoss {
        total,
        nll,
        regularizer,
        mu,
    })
}

/// `Σ_i μ_{s_i,t}` with the teacher detached. Returns the loss and each `μ`.
pub fn student_loss(
    tape: &mut Tape,
    students: &[BoundModel],
    teacher: &BoundModel,
    bs: &BatchInputs,
    cfg: &LotConfig,
) -> Result<(Var, Vec<f64>)> {
    let t = model_logits(tape, teacher, bs)?;
    let t = tape.detach(t)?;
    let mut total: Option<Var> = None;
    let mut mus = Vec::with_capacity(students.len());
    for net in students {
        let s = model_logits(tape, net, bs)?;
        let mu = imitability(tape, cfg.metric, s, t, cfg.temperature)?;
        mus.push(tape.value(mu).item());
        total = Some(match total {
            None => mu,
            Some(acc) => tape.add(acc, mu)?,
        });
    }
    match total {
        Some(v) => Ok((v, mus)),
        None => config_err("student_loss needs at least one student"),
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub teacher: Model,
    pub students: Vec<Model>,
    pub teacher_updates: u64,
    /// One student update moves every student once.
    pub student_updates: u64,
    pub teacher_opt: OptimizerState,
    pub student_opts: Vec<OptimizerState>,
}

/// `(teacher, student, total)` update counts.
pub fn count_updates(state: &TrainState) -> (u64, u64, u64) {
    (
        state.teacher_updates,
        state.student_updates,
        state.teacher_updates + state.student_updates,
    )
}

/// The best evaluated teacher; ties keep the earliest step.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub score: f64,
    pub model: Model,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: MetricLog,
    pub best: Option<Checkpoint>,
    /// Evaluation of the final teacher.
    pub final_eval: Evaluation,
}

/// Running means of per-update quantities between evaluations.
#[derive(Default)]
struct Window {
    sums: Vec<(String, f64, usize)>,
}

impl Window {
    fn add(&mut self, name: &str, v: f64) {
        match self.sums.iter_mut().find(|(n, _, _)| n == name) {
            Some(e) => {
                e.1 += v;
                e.2 += 1;
            }
            None => self.sums.push((name.to_string(), v, 1)),
        }
    }

    fn flush(&mut self, log: &mut MetricLog, step: u64, t: f64) {
        for (name, sum, n) in self.sums.drain(..) {
            log.push(step, name, sum / n as f64, t);
        }
    }
}

fn record_eval(
    task: &Task,
    model: &Model,
    step: u64,
    t: f64,
    log: &mut MetricLog,
    best: &mut Option<Checkpoint>,
) -> Result<Evaluation> {
    let e = task.evaluate(model)?;
    if let Some(a) = e.accuracy {
        log.push(step, "test_accuracy", a, t);
    }
    if let Some(p) = e.perplexity {
        log.push(step, "test_perplexity", p, t);
    }
    log.push(step, "test_nll", e.nll, t);
    let score = e.score();
    if best.as_ref().is_none_or(|b| score > b.score) {
        *best = Some(Checkpoint {
            step,
            score,
            model: model.clone(),
        });
    }
    Ok(e)
}

fn check_specs(task: &Task, teacher: &ModelSpec, student: &ModelSpec) -> Result<()> {
    task.check_spec(teacher)?;
    task.check_spec(student)?;
    if teacher.output_count() != student.output_count() {
        return config_err("teacher and student output counts differ");
    }
    Ok(())
}

/// The interleaved loop: one teacher update on `NLL(B_t) + R(θ)`, then `N`
/// student updates on fresh `B_s` draws, until teacher plus student updates
/// reach the budget. The last iteration may end early; the metric
/// `partial_final_iteration` records whether it did.
pub fn lot_train(
    cfg: &LotConfig,
    task: &Task,
    teacher_spec: &ModelSpec,
    student_spec: &ModelSpec,
    run_id: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_specs(task, teacher_spec, student_spec)?;
    let n = cfg.student_steps as u64;
    if cfg.total_update_budget < 1 + n {
        return config_err(format!(
            "budget {} is smaller than one outer iteration (1 + N = {})",
            cfg.total_update_budget,
            1 + n
        ));
    }
    let mut state = TrainState {
        teacher: init_model(teacher_spec, cfg.seeds.teacher_init)?,
        students: cfg
            .seeds
            .student_init
            .iter()
            .map(|&s| init_model(student_spec, s))
            .collect::<Result<_>>()?,
        teacher_updates: 0,
        student_updates: 0,
        teacher_opt: OptimizerState::new(cfg.teacher_optim)?,
        student_opts: (0..cfg.student_count())
            .map(|_| OptimizerState::new(cfg.student_optim))
            .collect::<lot_autodiff::Result<_>>()?,
    };
    let mut bt_iter = BatchIterator::new(task.teacher_len(), cfg.teacher_batch, cfg.seeds.teacher_order)?;
    let mut bs_iter = BatchIterator::new(task.student_len(), cfg.student_batch, cfg.seeds.student_order)?;
    let mut log = MetricLog::new(run_id, RunRole::Lot.as_str());
    let mut best = None;
    let mut window = Window::default();
    let cadence = cfg.eval_cadence();
    let budget = cfg.total_update_budget;
    let mut final_eval = None;
    let mut partial = false;

    while state.teacher_updates + state.student_updates < budget {
        let bt = task.labeled_batch(&bt_iter.next_indices());
        let bs = task.student_batch(&bs_iter.next_indices());
        let mut tape = Tape::new();
        let teacher = state.teacher.bind(&mut tape, true);
        let students: Vec<BoundModel> = state.students.iter().map(|m| m.bind(&mut tape, false)).collect();
        let loss = teacher_loss(&mut tape, &teacher, &students, &bt, &bs, cfg)?;
        let grads = tape.backward(loss.total)?;
        optimizer_step(&mut state.teacher.params, &teacher.vars, &grads, &mut state.teacher_opt)?;
        state.teacher_updates += 1;
        window.add("train_loss", tape.value(loss.nll).item());
        window.add("regularizer", tape.value(loss.regularizer).item());
        for (i, mu) in loss.mu.iter().enumerate() {
            window.add(&format!("mu_t_s{i}"), *mu);
        }

        let remaining = budget - (state.teacher_updates + state.student_updates);
        let student_steps = n.min(remaining);
        partial = student_steps < n;
        for _ in 0..student_steps {
            let bs = task.student_batch(&bs_iter.next_indices());
            let mut tape = Tape::new();
            let teacher = state.teacher.bind(&mut tape, false);
            let students: Vec<BoundModel> = state.students.iter().map(|m| m.bind(&mut tape, true)).collect();
            let (loss, mus) = student_loss(&mut tape, &students, &teacher, &bs, cfg)?;
            let grads = tape.backward(loss)?;
            for ((model, net), opt) in state.students.iter_mut().zip(&students).zip(&mut state.student_opts) {
                optimizer_step(&mut model.params, &net.vars, &grads, opt)?;
            }
            state.student_updates += 1;
            for (i, mu) in mus.iter().enumerate() {
                window.add(&format!("mu_s{i}_t"), *mu);
            }
        }

        // The teacher is unchanged by student steps, so evaluating here sees
        // the same parameters as right after its update.
        let total = state.teacher_updates + state.student_updates;
        let step = state.teacher_updates;
        if step.is_multiple_of(cadence) || total >= budget {
            let t = total as f64;
            final_eval = Some(record_eval(task, &state.teacher, step, t, &mut log, &mut best)?);
            window.flush(&mut log, step, t);
        }
    }
    let (tu, su, total) = count_updates(&state);
    let step = state.teacher_updates;
    log.push(step, "teacher_updates", tu as f64, total as f64);
    log.push(step, "student_updates", su as f64, total as f64);
    log.push(step, "partial_final_iteration", if partial { 1.0 } else { 0.0 }, total as f64);
    Ok(TrainOutcome {
        state,
        log,
        best,
        final_eval: final_eval.expect("the last teacher update is always evaluated"),
    })
}

/// Plain NLL training of the teacher for the whole budget.
pub fn teacher_only_train(cfg: &LotConfig, task: &Task, spec: &ModelSpec, run_id: &str) -> Result<TrainOutcome> {
    cfg.validate()?;
    task.check_spec(spec)?;
    if cfg.total_update_budget < 1 {
        return config_err("budget must allow at least one update");
    }
    let teacher = init_model(spec, cfg.seeds.teacher_init)?;
    supervised_train(
        cfg,
        task,
        teacher,
        cfg.seeds.teacher_order,
        None,
        RunRole::TeacherOnly,
        run_id,
    )
}

/// Weights of the born-again student loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BanConfig {
    pub hard_weight: f64,
    pub soft_weight: f64,
    pub temperature: f64,
}

impl Default for BanConfig {
    fn default() -> Self {
        Self {
            hard_weight: 0.5,
            soft_weight: 0.5,
            temperature: 1.5,
        }
    }
}

/// Distils a frozen teacher into a student initialized from
/// `seeds.student_init[0]` with `hard · NLL + soft · KL(p_s ‖ p_t)` on `D_t`
/// batches. The student receives the whole update budget.
pub fn ban_distill(
    teacher: Option<&Model>,
    student_spec: &ModelSpec,
    task: &Task,
    cfg: &LotConfig,
    ban: &BanConfig,
    run_id: &str,
) -> Result<TrainOutcome> {
    let Some(teacher) = teacher else {
        return config_err("BAN needs a teacher checkpoint");
    };
    cfg.validate()?;
    check_specs(task, &teacher.spec, student_spec)?;
    if !(ban.hard_weight >= 0.0 && ban.soft_weight >= 0.0 && ban.temperature > 0.0) {
        return config_err("BAN weights must be non-negative and the temperature positive");
    }
    let student = init_model(student_spec, cfg.seeds.student_init[0])?;
    supervised_train(
        cfg,
        task,
        student,
        cfg.seeds.teacher_order,
        Some((teacher, ban)),
        RunRole::Ban,
        run_id,
    )
}

fn supervised_train(
    cfg: &LotConfig,
    task: &Task,
    mut model: Model,
    order_seed: u64,
    distill: Option<(&Model, &BanConfig)>,
    role: RunRole,
    run_id: &str,
) -> Result<TrainOutcome> {
    let mut opt = OptimizerState::new(cfg.teacher_optim)?;
    let mut it = BatchIterator::new(task.teacher_len(), cfg.teacher_batch, order_seed)?;
    let mut log = MetricLog::new(run_id, role.as_str());
    let mut best = None;
    let mut window = Window::default();
    let cadence = cfg.eval_cadence();
    let budget = cfg.total_update_budget;
    let mut final_eval = None;
    for step in 1..=budget {
        let bt = task.labeled_batch(&it.next_indices());
        let mut tape = Tape::new();
        let net = model.bind(&mut tape, true);
        let logits = model_logits(&mut tape, &net, &bt.inputs)?;
        let lp = tape.log_softmax_temp(logits, 1.0)?;
        let nll = tape.nll_loss(lp, &bt.targets)?;
        let loss = match distill {
            None => nll,
            Some((teacher, ban)) => {
                let mut loss = None;
                if ban.hard_weight != 0.0 {
                    loss = Some(tape.scale(nll, ban.hard_weight)?);
                }
                if ban.soft_weight != 0.0 {
                    let frozen = teacher.bind(&mut tape, false);
                    let t = model_logits(&mut tape, &frozen, &bt.inputs)?;
                    let t = tape.detach(t)?;
                    let kl = imitability(&mut tape, MetricKind::Kl, logits, t, ban.temperature)?;
                    window.add("soft_loss", tape.value(kl).item());
                    let soft = tape.scale(kl, ban.soft_weight)?;
                    loss = Some(match loss {
                        None => soft,
                        Some(h) => tape.add(h, soft)?,
                    });
                }
                loss.unwrap_or(nll)
            }
        };
        let grads = tape.backward(loss)?;
        optimizer_step(&mut model.params, &net.vars, &grads, &mut opt)?;
        window.add("train_loss", tape.value(nll).item());
        if step % cadence == 0 || step == budget {
            let t = step as f64;
            final_eval = Some(record_eval(task, &model, step, t, &mut log, &mut best)?);
            window.flush(&mut log, step, t);
        }
    }
    let (teacher_updates, student_updates) = match role {
        RunRole::Ban => (0, budget),
        _ => (budget, 0),
    };
    log.push(budget, "teacher_updates", teacher_updates as f64, budget as f64);
    log.push(budget, "student_updates", student_updates as f64, budget as f64);
    let state = TrainState {
        teacher: model,
        students: Vec::new(),
        teacher_updates,
        student_updates,
        teacher_opt: opt,
        student_opts: Vec::new(),
    };
    Ok(TrainOutcome {
        state,
        log,
        best,
        final_eval: final_eval.expect("the final step is always evaluated"),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImitateConfig {
    pub steps: u64,
    pub batch: usize,
    pub optim: OptimizerConfig,
    pub temperature: f64,
    pub eval_every: u64,
    pub order_seed: u64,
}

#[derive(Clone, Debug)]
pub struct ImitationOutcome {
    pub student: Model,
    pub log: MetricLog,
    /// `(step, train KL, test KL)` including step 0.
    pub curve: Vec<(u64, f64, f64)>,
}

/// Mean `KL(p_s ‖ p_t)` over the rows of `inputs`.
pub fn mean_kl(student: &Model, teacher: &Model, inputs: &Tensor, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = student.bind(&mut tape, false);
    let t = teacher.bind(&mut tape, false);
    let x = tape.constant(inputs.clone());
    let ls = forward_classifier(&mut tape, &s, x)?;
    let lt = forward_classifier(&mut tape, &t, x)?;
    let kl = imitability(&mut tape, MetricKind::Kl, ls, lt, temperature)?;
    Ok(tape.value(kl).item())
}

/// Trains `student` to match a frozen teacher on `train_inputs`, recording
/// train and test KL at step 0 and every `eval_every` steps.
pub fn imitate_only_train(
    teacher: &Model,
    mut student: Model,
    train_inputs: &Tensor,
    test_inputs: &Tensor,
    cfg: &ImitateConfig,
    role: RunRole,
    run_id: &str,
) -> Result<ImitationOutcome> {
    if teacher.spec.output_count() != student.spec.output_count() {
        return config_err("teacher and student output counts differ");
    }
    if cfg.steps == 0 || cfg.batch == 0 || cfg.eval_every == 0 {
        return config_err("imitation needs positive steps, batch and eval_every");
    }
    let pool = UnlabeledDataset::new(train_inputs.clone(), crate::data::Provenance::IdenticalToTrain)?;
    let mut opt = OptimizerState::new(cfg.optim)?;
    let mut it = BatchIterator::new(pool.len(), cfg.batch, cfg.order_seed)?;
    let mut log = MetricLog::new(run_id, role.as_str());
    let mut curve = Vec::new();
    let mut record = |student: &Model, step: u64, log: &mut MetricLog| -> Result<()> {
        let tr = mean_kl(student, teacher, train_inputs, cfg.temperature)?;
        let te = mean_kl(student, teacher, test_inputs, cfg.temperature)?;
        log.push(step, "train_kl", tr, step as f64);
        log.push(step, "test_kl", te, step as f64);
        curve.push((step, tr, te));
        Ok(())
    };
    record(&student, 0, &mut log)?;
    for step in 1..=cfg.steps {
        let x = pool.gather(&it.next_indices());
        let mut tape = Tape::new();
        let s = student.bind(&mut tape, true);
        let t = teacher.bind(&mut tape, false);
        let xv = tape.constant(x);
        let ls = forward_classifier(&mut tape, &s, xv)?;
        let lt = forward_classifier(&mut tape, &t, xv)?;
        let lt = tape.detach(lt)?;
        let loss = imitability(&mut tape, MetricKind::Kl, ls, lt, cfg.temperature)?;
        let grads = tape.backward(loss)?;
        optimizer_step(&mut student.params, &s.vars, &grads, &mut opt)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            record(&student, step, &mut log)?;
        }
    }
    Ok(ImitationOutcome { student, log, curve })
}
