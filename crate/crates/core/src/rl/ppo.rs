use std::collections::VecDeque;

use lot_autodiff::{optimizer_step, OptimizerConfig, OptimizerState, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::env::{env_step, Actor, Env, GridWorld, StepCounters, ACTION_COUNT};
use crate::error::{config_err, LotError, Result};
use crate::metrics::MetricLog;
use crate::model::{forward_policy, init_model, BoundModel, Model, ModelSpec};
use crate::seed::{derive_seed, rng_from};
use crate::train::{lot_regularizer, student_loss, BatchInputs, LotConfig, RunRole, RunSeeds};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    /// Log-probability of `action` under the policy that chose it.
    pub log_prob: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub actor: Actor,
    pub transitions: Vec<Transition>,
    /// `V(s_n)` for the state after the last transition, or 0 when it ended an episode.
    pub bootstrap_value: f64,
    /// Returns of episodes that ended inside this rollout.
    pub episode_returns: Vec<f64>,
    pub episode_lengths: Vec<usize>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn states(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.transitions.iter().map(|t| t.state.clone()).collect();
        Tensor::from_rows(&rows).expect("rollout states share one width")
    }
}

/// Action log-probabilities and values of a frozen policy for every cell.
/// Rows are computed exactly as a batched forward pass would.
#[derive(Clone, Debug)]
pub struct PolicyTable {
    pub log_probs: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl PolicyTable {
    pub fn new(policy: &Model, world: &GridWorld) -> Result<Self> {
        let n = world.cell_count();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| world.encode(world.cell(i))).collect();
        let (lp, values) = policy_eval(policy, &Tensor::from_rows(&rows)?)?;
        let a = ACTION_COUNT;
        if lp.len() != n * a {
            return config_err(format!("policy has {} actions, the grid needs {a}", lp.len() / n));
        }
        Ok(Self {
            log_probs: lp.chunks(a).map(<[f64]>::to_vec).collect(),
            values,
        })
    }

    /// Samples by inverting the cumulative distribution.
    pub fn sample(&self, index: usize, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let lp = &self.log_probs[index];
        for (a, l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return a;
            }
        }
        lp.len() - 1
    }
}

/// Flat row-major log-probabilities `[rows · actions]` and values of `states`.
pub fn policy_eval(policy: &Model, states: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let net = policy.bind(&mut tape, false);
    let x = tape.constant(states.clone());
    let (logits, values) = forward_policy(&mut tape, &net, x)?;
    let lp = tape.log_softmax_temp(logits, 1.0)?;
    Ok((tape.value(lp).data().to_vec(), tape.value(values).data().to_vec()))
}

/// Runs the teacher policy for `n_steps`, restarting finished episodes.
/// The environment carries over between calls, so an episode may span rollouts.
pub fn collect_rollout(policy: &Model, env: &mut Env, n_steps: usize, rng: &mut ChaCha8Rng) -> Result<RolloutBatch> {
    if n_steps == 0 {
        return config_err("a rollout needs at least one step");
    }
    let table = PolicyTable::new(policy, env.world())?;
    if env.is_done() {
        env.restart();
    }
    let mut transitions = Vec::with_capacity(n_steps);
    let (mut episode_returns, mut episode_lengths) = (Vec::new(), Vec::new());
    for _ in 0..n_steps {
        let idx = env.world().index(env.position());
        let state = env.state();
        let action = table.sample(idx, rng);
        let out = env_step(env, Actor::Teacher, action)?;
        transitions.push(Transition {
            state,
            action,
            reward: out.reward,
            done: out.done,
            log_prob: table.log_probs[idx][action],
            value: table.values[idx],
        });
        if out.done {
            episode_returns.push(env.episode_return());
            episode_lengths.push(env.elapsed());
            env.restart();
        }
    }
    let last_done = transitions.last().is_some_and(|t| t.done);
    let bootstrap_value = if last_done {
        0.0
    } else {
        table.values[env.world().index(env.position())]
    };
    Ok(RolloutBatch {
        actor: Actor::Teacher,
        transitions,
        bootstrap_value,
        episode_returns,
        episode_lengths,
    })
}

/// Mean undiscounted return of `episodes` episodes sampled from `policy` on a
/// private environment. Returns the mean and the evaluator's step count.
pub fn evaluate_policy(policy: &Model, world: &GridWorld, episodes: usize, seed: u64) -> Result<(f64, StepCounters)> {
    if episodes == 0 {
        return config_err("evaluation needs at least one episode");
    }
    let table = PolicyTable::new(policy, world)?;
    let mut env = Env::new(world.clone(), derive_seed(seed, "dynamics"))?;
    let mut rng = rng_from(derive_seed(seed, "actions"));
    let mut total = 0.0;
    for _ in 0..episodes {
        env.restart();
        while !env.is_done() {
            let a = table.sample(world.index(env.position()), &mut rng);
            env_step(&mut env, Actor::Evaluator, a)?;
        }
        total += env.episode_return();
    }
    Ok((total / episodes as f64, env.counters()))
}

/// Advantages and value targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Advantages {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// GAE: `A_t = δ_t + γλ(1 − done_t) A_{t+1}` with
/// `δ_t = r_t + γ V(s_{t+1})(1 − done_t) − V(s_t)`. Step-limit truncation is
/// treated as termination.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    gae_lambda: f64,
) -> Advantages {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "GAE inputs must share one length");
    let mut advantages = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * gae_lambda * live * next_adv;
        advantages[t] = next_adv;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Advantages { advantages, returns }
}

pub fn rollout_advantages(batch: &RolloutBatch, gamma: f64, gae_lambda: f64) -> Advantages {
    let rewards: Vec<f64> = batch.transitions.iter().map(|t| t.reward).collect();
    let values: Vec<f64> = batch.transitions.iter().map(|t| t.value).collect();
    let dones: Vec<bool> = batch.transitions.iter().map(|t| t.done).collect();
    gae_advantages(&rewards, &values, &dones, batch.bootstrap_value, gamma, gae_lambda)
}

/// Shifts to mean 0 and scales to population std 1. A constant input becomes all zeros.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { 0.0 };
    }
}

/// FIFO store of teacher-visited states, `D_s`.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    states: VecDeque<Vec<f64>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return config_err("replay capacity must be positive");
        }
        Ok(Self {
            capacity,
            states: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Oldest first.
    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.iter().map(Vec::as_slice)
    }

    /// Appends the states of a teacher rollout, evicting the oldest beyond capacity.
    pub fn push_rollout(&mut self, batch: &RolloutBatch) -> Result<()> {
        if batch.actor != Actor::Teacher {
            return config_err("only teacher rollouts may enter the replay buffer");
        }
        for t in &batch.transitions {
            if self.states.len() == self.capacity {
                self.states.pop_front();
            }
            self.states.push_back(t.state.clone());
        }
        Ok(())
    }

    /// `min(batch, len)` distinct states drawn uniformly.
    pub fn sample(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if self.states.is_empty() {
            return Err(LotError::Env("sampling from an empty replay buffer".into()));
        }
        let k = batch.min(self.states.len());
        let rows: Vec<Vec<f64>> = rand::seq::index::sample(rng, self.states.len(), k)
            .into_iter()
            .map(|i| self.states[i].clone())
            .collect();
        Ok(Tensor::from_rows(&rows)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub rollout_len: usize,
    /// Teacher environment steps for the whole run.
    pub total_env_steps: u64,
    pub replay_capacity: usize,
    /// α, N, λ, temperature, student optimizer and batch, seeds. The teacher
    /// optimizer here drives PPO; the supervised budget and batch are unused.
    pub lot: LotConfig,
    pub env_seed: u64,
    pub eval_episodes: usize,
    /// Environment steps between evaluations; `None` means a tenth of the budget.
    pub eval_every: Option<u64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 32,
            value_coef: 0.5,
            entropy_coef: 0.01,
            rollout_len: 128,
            total_env_steps: 200_000,
            replay_capacity: 2048,
            lot: LotConfig {
                alpha: 0.5,
                student_steps: 5,
                temperature: 1.0,
                teacher_optim: OptimizerConfig::adam(2.5e-4),
                student_optim: OptimizerConfig::adam(2.5e-4),
                ..LotConfig::default()
            },
            env_seed: derive_seed(0, "env"),
            eval_episodes: 100,
            eval_every: None,
        }
    }
}

impl PpoConfig {
    /// Seeds for `k` students derived from `master`.
    pub fn with_master(mut self, master: u64, k: usize) -> Self {
        self.lot = self.lot.with_students(k, master);
        self.env_seed = derive_seed(master, "env");
        self
    }

    pub fn eval_cadence(&self) -> u64 {
        self.eval_every.unwrap_or(self.total_env_steps / 10).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.lot.validate()?;
        let coefs = [self.gamma, self.gae_lambda, self.clip, self.value_coef, self.entropy_coef];
        if !coefs.iter().all(|c| c.is_finite()) {
            return config_err("PPO coefficients must be finite");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return config_err(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return config_err(format!("gae_lambda must lie in [0, 1], got {}", self.gae_lambda));
        }
        if self.clip <= 0.0 {
            return config_err("clip ratio must be positive");
        }
        if self.rollout_len == 0 || self.epochs == 0 || self.minibatch == 0 {
            return config_err("rollout length, epochs and minibatch must be positive");
        }
        if self.total_env_steps == 0 {
            return config_err("environment-step budget must be positive");
        }
        if self.replay_capacity == 0 || self.eval_episodes == 0 {
            return config_err("replay capacity and evaluation episodes must be positive");
        }
        Ok(())
    }
}

/// One PPO minibatch with per-rollout normalized advantages.
#[derive(Clone, Debug)]
pub struct PpoMinibatch {
    pub states: Tensor,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PpoLoss {
    /// `policy + value_coef · value − entropy_coef · entropy`.
    pub total: Var,
    /// `−mean(min(ρA, clip(ρ, 1 ± ε)A))`.
    pub policy: Var,
    /// `mean((V − target)²)`.
    pub value: Var,
    pub entropy: Var,
    /// Fraction of rows where the ratio left `[1 − ε, 1 + ε]`.
    pub clip_fraction: f64,
}

fn vector(tape: &mut Tape, v: &[f64]) -> Result<Var> {
    Ok(tape.constant(Tensor::vector(v.to_vec())?))
}

pub fn ppo_loss(tape: &mut Tape, net: &BoundModel, mb: &PpoMinibatch, cfg: &PpoConfig) -> Result<PpoLoss> {
    let b = mb.actions.len();
    if b == 0 || mb.old_log_probs.len() != b || mb.advantages.len() != b || mb.returns.len() != b {
        return config_err("minibatch fields must share one positive length");
    }
    let x = tape.constant(mb.states.clone());
    let (logits, values) = forward_policy(tape, net, x)?;
    let lp = tape.log_softmax_temp(logits, 1.0)?;
    let taken = tape.gather(lp, &mb.actions)?;
    let old = vector(tape, &mb.old_log_probs)?;
    let log_ratio = tape.sub(taken, old)?;
    let ratio = tape.exp(log_ratio)?;
    let adv = vector(tape, &mb.advantages)?;
    let unclipped = tape.mul(ratio, adv)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
    let clipped = tape.mul(clipped_ratio, adv)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let surrogate = tape.mean(surrogate)?;
    let policy = tape.scale(surrogate, -1.0)?;

    let values = tape.reshape(values, vec![b])?;
    let targets = vector(tape, &mb.returns)?;
    let err = tape.sub(values, targets)?;
    let sq = tape.mul(err, err)?;
    let value = tape.mean(sq)?;

    let p = tape.softmax_temp(logits, 1.0)?;
    let plp = tape.mul(p, lp)?;
    let plp = tape.sum(plp)?;
    let entropy = tape.scale(plp, -1.0 / b as f64)?;

    let v_term = tape.scale(value, cfg.value_coef)?;
    let e_term = tape.scale(entropy, -cfg.entropy_coef)?;
    let total = tape.add(policy, v_term)?;
    let total = tape.add(total, e_term)?;
    let clip_fraction = tape
        .value(ratio)
        .data()
        .iter()
        .filter(|r| (**r - 1.0).abs() > cfg.clip)
        .count() as f64
        / b as f64;
    Ok(PpoLoss {
        total,
        policy,
        value,
        entropy,
        clip_fraction,
    })
}

/// Students and replay used for `R(θ)` inside a PPO update.
pub struct RegularizerSource<'a> {
    pub students: &'a [Model],
    pub replay: &'a ReplayBuffer,
    pub rng: &'a mut ChaCha8Rng,
}

/// Means over the minibatch steps of one PPO update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub regularizer: f64,
    /// `μ_{t,s_i}` per student; empty when `R` was not applied.
    pub mu: Vec<f64>,
    pub gradient_steps: u64,
    /// `α > 0` but the replay buffer was empty, so `R` was skipped.
    pub regularizer_skipped: bool,
}

/// `epochs` passes of shuffled minibatches over one rollout. When `reg` is
/// given and `α > 0`, each minibatch loss also carries `R(θ)` on a fresh
/// replay draw.
pub fn ppo_update(
    teacher: &mut Model,
    opt: &mut OptimizerState,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    mut reg: Option<RegularizerSource<'_>>,
    shuffle_rng: &mut ChaCha8Rng,
) -> Result<PpoStats> {
    if batch.is_empty() {
        return config_err("empty rollout");
    }
    let Advantages {
        mut advantages,
        returns,
    } = rollout_advantages(batch, cfg.gamma, cfg.gae_lambda);
    normalize_advantages(&mut advantages);
    let n = batch.len();
    let use_reg = cfg.lot.alpha > 0.0 && reg.is_some();
    let skipped = use_reg && reg.as_ref().is_some_and(|r| r.replay.is_empty());
    let mut stats = PpoStats {
        regularizer_skipped: skipped,
        ..PpoStats::default()
    };
    let mut mu_sums = vec![0.0; cfg.lot.student_count()];
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(shuffle_rng);
        for chunk in order.chunks(cfg.minibatch) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| batch.transitions[i].state.clone()).collect();
            let mb = PpoMinibatch {
                states: Tensor::from_rows(&rows)?,
                actions: chunk.iter().map(|&i| batch.transitions[i].action).collect(),
                old_log_probs: chunk.iter().map(|&i| batch.transitions[i].log_prob).collect(),
                advantages: chunk.iter().map(|&i| advantages[i]).collect(),
                returns: chunk.iter().map(|&i| returns[i]).collect(),
            };
            let mut tape = Tape::new();
            let net = teacher.bind(&mut tape, true);
            let loss = ppo_loss(&mut tape, &net, &mb, cfg)?;
            let mut total = loss.total;
            if use_reg && !skipped {
                let src = reg.as_mut().expect("checked above");
                let bs = BatchInputs::Features(src.replay.sample(cfg.lot.student_batch, src.rng)?);
                let students: Vec<BoundModel> = src.students.iter().map(|m| m.bind(&mut tape, false)).collect();
                let (r, mu) = lot_regularizer(&mut tape, &net, &students, &bs, &cfg.lot)?;
                total = tape.add(total, r)?;
                stats.regularizer += tape.value(r).item();
                for (acc, m) in mu_sums.iter_mut().zip(mu) {
                    *acc += m;
                }
            }
            let grads = tape.backward(total)?;
            optimizer_step(&mut teacher.params, &net.vars, &grads, opt)?;
            stats.policy_loss += tape.value(loss.policy).item();
            stats.value_loss += tape.value(loss.value).item();
            stats.entropy += tape.value(loss.entropy).item();
            stats.clip_fraction += loss.clip_fraction;
            stats.gradient_steps += 1;
        }
    }
    let k = stats.gradient_steps as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.clip_fraction /= k;
    stats.regularizer /= k;
    if use_reg && !skipped {
        stats.mu = mu_sums.iter().map(|m| m / k).collect();
    }
    Ok(stats)
}

/// `steps` updates of every student on `KL(π_s ‖ π_t)` over replay draws,
/// with the teacher detached. Returns `μ_{s_i,t}` per step; an empty buffer
/// makes this a no-op.
pub fn student_imitate_rl(
    students: &mut [Model],
    opts: &mut [OptimizerState],
    teacher: &Model,
    replay: &ReplayBuffer,
    steps: usize,
    cfg: &LotConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    if students.len() != opts.len() {
        return config_err("one optimizer per student is required");
    }
    let mut out = Vec::with_capacity(steps);
    if replay.is_empty() || students.is_empty() {
        return Ok(out);
    }
    for _ in 0..steps {
        let bs = BatchInputs::Features(replay.sample(cfg.student_batch, rng)?);
        let mut tape = Tape::new();
        let t = teacher.bind(&mut tape, false);
        let nets: Vec<BoundModel> = students.iter().map(|m| m.bind(&mut tape, true)).collect();
        let (loss, mus) = student_loss(&mut tape, &nets, &t, &bs, cfg)?;
        let grads = tape.backward(loss)?;
        for ((model, net), opt) in students.iter_mut().zip(&nets).zip(opts.iter_mut()) {
            optimizer_step(&mut model.params, &net.vars, &grads, opt)?;
        }
        out.push(mus);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RlOutcome {
    pub teacher: Model,
    pub students: Vec<Model>,
    pub log: MetricLog,
    /// Counters of the training environment.
    pub counters: StepCounters,
    /// Steps taken by evaluation episodes on separate environments.
    pub eval_steps: u64,
    /// Evaluation return of the final teacher.
    pub final_return: f64,
    pub ppo_updates: u64,
    pub student_updates: u64,
}

/// State shared by both training loops.
struct Runner<'a> {
    cfg: &'a PpoConfig,
    world: &'a GridWorld,
    env: Env,
    teacher: Model,
    opt: OptimizerState,
    action_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    log: MetricLog,
    eval_steps: u64,
    next_eval: u64,
    last_return: f64,
    ppo_updates: u64,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a PpoConfig, world: &'a GridWorld, spec: &ModelSpec, role: RunRole, run_id: &str) -> Result<Self> {
        cfg.validate()?;
        check_policy_spec(spec, world)?;
        let seeds: &RunSeeds = &cfg.lot.seeds;
        Ok(Self {
            cfg,
            world,
            env: Env::new(world.clone(), derive_seed(cfg.env_seed, "dynamics"))?,
            teacher: init_model(spec, seeds.teacher_init)?,
            opt: OptimizerState::new(cfg.lot.teacher_optim)?,
            action_rng: rng_from(derive_seed(cfg.env_seed, "actions")),
            shuffle_rng: rng_from(seeds.teacher_order),
            log: MetricLog::new(run_id, role.as_str()),
            eval_steps: 0,
            next_eval: cfg.eval_cadence(),
            last_return: f64::NAN,
            ppo_updates: 0,
        })
    }

    fn steps(&self) -> u64 {
        self.env.counters().teacher
    }

    fn collect(&mut self) -> Result<RolloutBatch> {
        let remaining = self.cfg.total_env_steps - self.steps();
        let n = (self.cfg.rollout_len as u64).min(remaining) as usize;
        let batch = collect_rollout(&self.teacher, &mut self.env, n, &mut self.action_rng)?;
        if !batch.episode_returns.is_empty() {
            let step = self.steps();
            let mean = batch.episode_returns.iter().sum::<f64>() / batch.episode_returns.len() as f64;
            self.log.push(step, "episode_return", mean, step as f64);
        }
        Ok(batch)
    }

    fn record(&mut self, stats: &PpoStats) {
        let step = self.steps();
        let t = step as f64;
        self.log.push(step, "policy_loss", stats.policy_loss, t);
        self.log.push(step, "value_loss", stats.value_loss, t);
        self.log.push(step, "entropy", stats.entropy, t);
        self.log.push(step, "clip_fraction", stats.clip_fraction, t);
        if !stats.mu.is_empty() {
            self.log.push(step, "regularizer", stats.regularizer, t);
            for (i, m) in stats.mu.iter().enumerate() {
                self.log.push(step, format!("mu_t_s{i}"), *m, t);
            }
        }
        if stats.regularizer_skipped {
            self.log.push(step, "regularizer_skipped", 1.0, t);
        }
    }

    fn maybe_evaluate(&mut self) -> Result<()> {
        let step = self.steps();
        let done = step >= self.cfg.total_env_steps;
        if step < self.next_eval && !done {
            return Ok(());
        }
        while self.next_eval <= step {
            self.next_eval += self.cfg.eval_cadence();
        }
        // Every evaluation replays the same episode seeds, so paired runs
        // are compared on identical dynamics.
        let seed = derive_seed(self.cfg.env_seed, "eval");
        let (ret, counters) = evaluate_policy(&self.teacher, self.world, self.cfg.eval_episodes, seed)?;
        self.eval_steps += counters.evaluator;
        self.last_return = ret;
        self.log.push(step, "eval_return", ret, step as f64);
        Ok(())
    }

    fn finish(mut self, students: Vec<Model>, student_updates: u64) -> RlOutcome {
        let step = self.steps();
        let t = step as f64;
        let counters = self.env.counters();
        self.log.push(step, "env_steps", counters.teacher as f64, t);
        self.log.push(step, "student_env_steps", counters.student as f64, t);
        self.log.push(step, "ppo_updates", self.ppo_updates as f64, t);
        self.log.push(step, "student_updates", student_updates as f64, t);
        RlOutcome {
            teacher: self.teacher,
            students,
            log: self.log,
            counters,
            eval_steps: self.eval_steps,
            final_return: self.last_return,
            ppo_updates: self.ppo_updates,
            student_updates,
        }
    }
}

fn check_policy_spec(spec: &ModelSpec, world: &GridWorld) -> Result<()> {
    spec.validate()?;
    match spec {
        ModelSpec::PolicyValue { input_dim, actions, .. }
            if *input_dim == world.feature_dim() && *actions == ACTION_COUNT =>
        {
            Ok(())
        }
        ModelSpec::PolicyValue { .. } => config_err(format!(
            "policy must map {} features to {ACTION_COUNT} actions",
            world.feature_dim()
        )),
        _ => config_err("RL agents need a policy/value spec"),
    }
}

/// Plain PPO on the teacher alone, with no replay buffer or students.
pub fn ppo_train(cfg: &PpoConfig, world: &GridWorld, spec: &ModelSpec, run_id: &str) -> Result<RlOutcome> {
    let mut run = Runner::new(cfg, world, spec, RunRole::TeacherOnly, run_id)?;
    while run.steps() < cfg.total_env_steps {
        let batch = run.collect()?;
        let stats = ppo_update(&mut run.teacher, &mut run.opt, &batch, cfg, None, &mut run.shuffle_rng)?;
        run.ppo_updates += 1;
        run.record(&stats);
        run.maybe_evaluate()?;
    }
    Ok(run.finish(Vec::new(), 0))
}

/// PPO with the teaching regularizer: after each rollout enters the replay
/// buffer, the teacher takes a PPO update with `R(θ)` on replay draws, then
/// the students take `N` imitation steps. Only the teacher touches the
/// environment.
pub fn lot_ppo_train(
    cfg: &PpoConfig,
    world: &GridWorld,
    teacher_spec: &ModelSpec,
    student_spec: &ModelSpec,
    run_id: &str,
) -> Result<RlOutcome> {
    let mut run = Runner::new(cfg, world, teacher_spec, RunRole::Lot, run_id)?;
    check_policy_spec(student_spec, world)?;
    let mut students: Vec<Model> = cfg
        .lot
        .seeds
        .student_init
        .iter()
        .map(|&s| init_model(student_spec, s))
        .collect::<Result<_>>()?;
    let mut student_opts = (0..students.len())
        .map(|_| OptimizerState::new(cfg.lot.student_optim))
        .collect::<lot_autodiff::Result<Vec<_>>>()?;
    let mut replay = ReplayBuffer::new(cfg.replay_capacity)?;
    let mut replay_rng = rng_from(cfg.lot.seeds.student_order);
    let mut student_updates = 0;
    while run.steps() < cfg.total_env_steps {
        let batch = run.collect()?;
        replay.push_rollout(&batch)?;
        let source = RegularizerSource {
            students: &students,
            replay: &replay,
            rng: &mut replay_rng,
        };
        let stats = ppo_update(&mut run.teacher, &mut run.opt, &batch, cfg, Some(source), &mut run.shuffle_rng)?;
        run.ppo_updates += 1;
        run.record(&stats);
        let mus = student_imitate_rl(
            &mut students,
            &mut student_opts,
            &run.teacher,
            &replay,
            cfg.lot.student_steps,
            &cfg.lot,
            &mut replay_rng,
        )?;
        student_updates += mus.len() as u64;
        if !mus.is_empty() {
            let step = run.steps();
            for i in 0..students.len() {
                let mean = mus.iter().map(|m| m[i]).sum::<f64>() / mus.len() as f64;
                run.log.push(step, format!("mu_s{i}_t"), mean, step as f64);
            }
        }
        run.maybe_evaluate()?;
    }
    Ok(run.finish(students, student_updates))
}
