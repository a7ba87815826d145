use lot_autodiff::{OptimizerConfig, OptimizerState, Tape, Tensor};
use lot_core::model::{init_model, Activation, Model, ModelSpec};
use lot_core::rl::*;
use lot_core::seed::rng_from;
use proptest::prelude::*;
use std::collections::VecDeque;

fn policy_spec(world: &GridWorld, hidden: usize) -> ModelSpec {
    ModelSpec::PolicyValue {
        input_dim: world.feature_dim(),
        trunk: vec![hidden],
        activation: Activation::Tanh,
        actions: ACTION_COUNT,
    }
}

fn tiny_world(p_slip: f64) -> GridWorld {
    GridWorld::parse_map("S..\n.H.\n..G\n", p_slip, 12).unwrap()
}

fn small_cfg(budget: u64) -> PpoConfig {
    let mut cfg = PpoConfig::default().with_master(7, 1);
    cfg.total_env_steps = budget;
    cfg.rollout_len = 32;
    cfg.minibatch = 16;
    cfg.epochs = 2;
    cfg.eval_episodes = 5;
    cfg.lot.student_batch = 16;
    cfg.replay_capacity = 64;
    cfg
}

#[test]
fn reset_is_deterministic_in_the_seed() {
    let world = GridWorld::open(5, 5, (0, 0), (4, 4), 0.3, 50).unwrap();
    let actions = [1, 2, 2, 1, 0, 3, 2, 1, 1, 2, 2, 1];
    let run = |seed| {
        let mut env = Env::new(world.clone(), 99).unwrap();
        let first = env_reset(&mut env, seed);
        let mut trace = vec![first];
        for &a in &actions {
            if env.is_done() {
                break;
            }
            trace.push(env_step(&mut env, Actor::Teacher, a).unwrap().state);
        }
        trace
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn start_encoding_and_deterministic_moves() {
    let world = GridWorld::parse_map("#..\n.S.\n..G\n", 0.0, 10).unwrap();
    let mut env = Env::new(world.clone(), 0).unwrap();
    let s = env_reset(&mut env, 1);
    assert_eq!(s.iter().position(|&v| v == 1.0), Some(4));
    assert_eq!(s.iter().sum::<f64>(), 1.0);
    // Up to (0,1), left is a wall, so the agent stays.
    let out = env_step(&mut env, Actor::Teacher, 0).unwrap();
    assert_eq!(env.position(), (0, 1));
    assert_eq!(out.reward, -0.01);
    let out = env_step(&mut env, Actor::Teacher, 3).unwrap();
    assert_eq!(env.position(), (0, 1));
    assert!(!out.done && !out.slipped);
    assert_eq!(out.reward, -0.01);
    // Off the top edge is blocked as well.
    env_step(&mut env, Actor::Teacher, 0).unwrap();
    assert_eq!(env.position(), (0, 1));
    for a in [1, 2] {
        env_step(&mut env, Actor::Teacher, a).unwrap();
    }
    let out = env_step(&mut env, Actor::Teacher, 2).unwrap();
    assert_eq!(env.position(), (2, 2));
    assert_eq!(out.reward, 1.0);
    assert!(out.done);
    assert!(env_step(&mut env, Actor::Teacher, 0).is_err());
    assert_eq!(env.counters().teacher, 6);
    assert_eq!(env.counters().student, 0);
}

#[test]
fn hazards_and_step_limit_terminate() {
    let world = GridWorld::parse_map("SH\n.G\n", 0.0, 3).unwrap();
    let mut env = Env::new(world.clone(), 0).unwrap();
    let out = env_step(&mut env, Actor::Teacher, 1).unwrap();
    assert_eq!((out.reward, out.done), (-1.0, true));
    env.restart();
    for i in 0..3 {
        let out = env_step(&mut env, Actor::Teacher, 0).unwrap();
        assert_eq!(out.done, i == 2);
    }
    assert!((env.episode_return() + 0.03).abs() < 1e-12);
}

#[test]
fn slip_frequency_matches_probability() {
    let world = GridWorld::open(9, 9, (4, 4), (0, 0), 0.2, 1_000_000).unwrap();
    let mut env = Env::new(world, 3).unwrap();
    let mut slips = 0;
    let n = 10_000;
    for i in 0..n {
        if env.is_done() {
            env.restart();
        }
        // Alternate directions so the walk stays near the centre.
        if env_step(&mut env, Actor::Teacher, [0, 2, 1, 3][i % 4]).unwrap().slipped {
            slips += 1;
        }
    }
    let freq = slips as f64 / n as f64;
    assert!((freq - 0.2).abs() <= 0.02, "slip frequency {freq}");
}

#[test]
fn map_parsing_validates_layouts() {
    assert!(GridWorld::parse_map("S.\n.G\n", 0.1, 10).is_ok());
    assert!(GridWorld::parse_map("S.\n..\n", 0.1, 10).is_err());
    assert!(GridWorld::parse_map("SS\n.G\n", 0.1, 10).is_err());
    assert!(GridWorld::parse_map("..\n.G\n", 0.1, 10).is_err());
    assert!(GridWorld::parse_map("S..\n.G\n", 0.1, 10).is_err());
    assert!(GridWorld::parse_map("S?\n.G\n", 0.1, 10).is_err());
    assert!(GridWorld::parse_map("S.\n.G\n", 1.0, 10).is_err());
    assert!(GridWorld::parse_map("S.\n.G\n", 0.1, 0).is_err());
    assert!(GridWorld::open(3, 3, (0, 0), (0, 0), 0.0, 5).is_err());
    assert!(GridWorld::open(3, 3, (0, 0), (3, 0), 0.0, 5).is_err());
    let w = GridWorld::standard(0.1);
    assert_eq!((w.width, w.height), (8, 8));
    assert_eq!(w.to_string(), STANDARD_MAP);
    let reparsed = GridWorld::parse_map(&w.to_string(), 0.1, w.max_steps).unwrap();
    assert_eq!(reparsed, w);

    // The goal is reachable from the start without crossing hazards.
    let mut seen = vec![false; w.cell_count()];
    let mut queue = VecDeque::from([w.start]);
    seen[w.index(w.start)] = true;
    let mut reached = false;
    while let Some(c) = queue.pop_front() {
        if w.goals.contains(&c) {
            reached = true;
            break;
        }
        if w.is_terminal(c) {
            continue;
        }
        for a in 0..ACTION_COUNT {
            let n = w.next_cell(c, a);
            if !seen[w.index(n)] {
                seen[w.index(n)] = true;
                queue.push_back(n);
            }
        }
    }
    assert!(reached);
}

#[test]
fn map_files_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.txt");
    std::fs::write(&path, "S.#\n..G\n").unwrap();
    let w = GridWorld::load_map(&path, 0.0, 20).unwrap();
    assert_eq!(w.walls, vec![(0, 2)]);
    assert_eq!(w.goals, vec![(1, 2)]);
}

/// Expected finite-horizon return of the uniform policy by backward induction
/// over (cell, steps left), with slips expanded explicitly.
fn uniform_policy_value(w: &GridWorld) -> f64 {
    let n = w.cell_count();
    let mut v = vec![0.0; n];
    for _ in 0..w.max_steps {
        let mut next = vec![0.0; n];
        for (i, slot) in next.iter_mut().enumerate() {
            let cell = w.cell(i);
            if w.is_terminal(cell) || w.is_wall(cell) {
                continue;
            }
            let mut total = 0.0;
            for chosen in 0..ACTION_COUNT {
                for taken in 0..ACTION_COUNT {
                    let p = (1.0 - w.p_slip) * f64::from(u8::from(taken == chosen)) + w.p_slip / ACTION_COUNT as f64;
                    let to = w.next_cell(cell, taken);
                    let (r, term) = w.arrival(to);
                    total += p * (r + if term { 0.0 } else { v[w.index(to)] });
                }
            }
            *slot = total / ACTION_COUNT as f64;
        }
        v = next;
    }
    v[w.index(w.start)]
}

#[test]
fn uniform_policy_return_matches_dynamic_programming() {
    let world = tiny_world(0.2);
    let expect = uniform_policy_value(&world);
    let uniform = init_model(&policy_spec(&world, 8), 0).unwrap().zeroed();
    let mut env = Env::new(world.clone(), 11).unwrap();
    let batch = collect_rollout(&uniform, &mut env, 60_000, &mut rng_from(12)).unwrap();
    let r = &batch.episode_returns;
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let sd = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(n > 5000.0);
    assert!((mean - expect).abs() < 4.0 * sd / n.sqrt(), "MC {mean} vs DP {expect}");
    assert!(batch.transitions.iter().all(|t| t.log_prob <= 0.0 && t.action < ACTION_COUNT));
}

#[test]
fn rollouts_store_frozen_policy_log_probs_and_are_deterministic() {
    let world = GridWorld::standard(0.1);
    let policy = init_model(&policy_spec(&world, 16), 3).unwrap();
    let collect = || {
        let mut env = Env::new(world.clone(), 5).unwrap();
        collect_rollout(&policy, &mut env, 300, &mut rng_from(6)).unwrap()
    };
    let batch = collect();
    assert_eq!(batch, collect());
    assert_eq!(batch.len(), 300);
    let (lp, values) = policy_eval(&policy, &batch.states()).unwrap();
    for (i, t) in batch.transitions.iter().enumerate() {
        assert!((lp[i * ACTION_COUNT + t.action] - t.log_prob).abs() <= 1e-12);
        assert!((values[i] - t.value).abs() <= 1e-12);
    }
    let done_count = batch.transitions.iter().filter(|t| t.done).count();
    assert_eq!(done_count, batch.episode_returns.len());
}

#[test]
fn rollouts_continue_episodes_across_calls() {
    let world = GridWorld::open(6, 6, (0, 0), (5, 5), 0.0, 1000).unwrap();
    let policy = init_model(&policy_spec(&world, 4), 1).unwrap();
    let mut env = Env::new(world, 0).unwrap();
    let mut rng = rng_from(2);
    let a = collect_rollout(&policy, &mut env, 5, &mut rng).unwrap();
    let resume = env.state();
    let b = collect_rollout(&policy, &mut env, 5, &mut rng).unwrap();
    assert!(!a.transitions[4].done);
    assert_ne!(a.bootstrap_value, 0.0);
    assert_eq!(b.transitions[0].state, resume);
    assert_eq!(env.counters().teacher, 10);
}

/// `A_t = Σ_k (γλ)^k δ_{t+k}`, truncated at episode ends.
fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], boot: f64, gamma: f64, lam: f64) -> Vec<f64> {
    let n = r.len();
    let next_v = |t: usize| if t + 1 < n { v[t + 1] } else { boot };
    let delta: Vec<f64> = (0..n)
        .map(|t| r[t] + if d[t] { 0.0 } else { gamma * next_v(t) } - v[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut w = 1.0;
            for k in t..n {
                sum += w * delta[k];
                if d[k] {
                    break;
                }
                w *= gamma * lam;
            }
            sum
        })
        .collect()
}

#[test]
fn gae_examples() {
    let a = gae_advantages(&[1.0], &[0.4], &[true], 7.0, 1.0, 1.0);
    assert!((a.advantages[0] - 0.6).abs() < 1e-15);
    assert!((a.returns[0] - 1.0).abs() < 1e-15);

    let (r, v, d) = ([0.5, -0.2, 1.0], [0.1, 0.3, -0.4], [false, false, false]);
    let zero = gae_advantages(&r, &v, &d, 0.25, 0.9, 0.0);
    let deltas = [0.5 + 0.9 * 0.3 - 0.1, -0.2 + 0.9 * -0.4 - 0.3, 1.0 + 0.9 * 0.25 + 0.4];
    assert_eq!(zero.advantages, deltas.to_vec());

    let full = gae_advantages(&r, &v, &d, 0.25, 0.9, 0.8);
    let expect = gae_oracle(&r, &v, &d, 0.25, 0.9, 0.8);
    for (x, y) in full.advantages.iter().zip(&expect) {
        assert!((x - y).abs() <= 1e-12);
    }
    // A terminal step in the middle cuts the chain.
    let d = [false, true, false];
    let cut = gae_advantages(&r, &v, &d, 0.25, 0.9, 0.8);
    let expect = gae_oracle(&r, &v, &d, 0.25, 0.9, 0.8);
    for (x, y) in cut.advantages.iter().zip(&expect) {
        assert!((x - y).abs() <= 1e-12);
    }
    assert!((cut.advantages[1] - (-0.2 - 0.3)).abs() <= 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gae_matches_direct_summation(
        steps in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, any::<bool>()), 1..30),
        boot in -1.0f64..1.0,
        gamma in 0.5f64..1.0,
        lam in 0.0f64..1.0,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let got = gae_advantages(&r, &v, &d, boot, gamma, lam);
        let want = gae_oracle(&r, &v, &d, boot, gamma, lam);
        for t in 0..r.len() {
            prop_assert!((got.advantages[t] - want[t]).abs() <= 1e-12);
            prop_assert!((got.returns[t] - (want[t] + v[t])).abs() <= 1e-12);
        }
    }

    #[test]
    fn normalized_advantages_have_zero_mean_unit_std(
        mut adv in prop::collection::vec(-100.0f64..100.0, 2..200),
    ) {
        prop_assume!(adv.iter().any(|a| (a - adv[0]).abs() > 1e-6));
        normalize_advantages(&mut adv);
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() <= 1e-9);
        prop_assert!((std - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn replay_is_fifo(capacity in 1usize..20, extra in 0usize..30) {
        let mut buf = ReplayBuffer::new(capacity).unwrap();
        let total = capacity + extra;
        let transitions = (0..total)
            .map(|i| Transition { state: vec![i as f64], action: 0, reward: 0.0, done: false, log_prob: 0.0, value: 0.0 })
            .collect();
        let batch = RolloutBatch { actor: Actor::Teacher, transitions, bootstrap_value: 0.0, episode_returns: vec![], episode_lengths: vec![] };
        buf.push_rollout(&batch).unwrap();
        prop_assert_eq!(buf.len(), capacity);
        let held: Vec<f64> = buf.states().map(|s| s[0]).collect();
        let want: Vec<f64> = (extra..total).map(|i| i as f64).collect();
        prop_assert_eq!(held, want);
    }
}

#[test]
fn replay_rejects_non_teacher_rollouts_and_samples_distinct_rows() {
    let mut buf = ReplayBuffer::new(10).unwrap();
    assert!(buf.sample(4, &mut rng_from(0)).is_err());
    let transitions: Vec<Transition> = (0..6)
        .map(|i| Transition {
            state: vec![i as f64],
            action: 0,
            reward: 0.0,
            done: false,
            log_prob: 0.0,
            value: 0.0,
        })
        .collect();
    let mut batch = RolloutBatch {
        actor: Actor::Student,
        transitions,
        bootstrap_value: 0.0,
        episode_returns: vec![],
        episode_lengths: vec![],
    };
    assert!(buf.push_rollout(&batch).is_err());
    assert!(buf.is_empty());
    batch.actor = Actor::Teacher;
    buf.push_rollout(&batch).unwrap();
    let s = buf.sample(4, &mut rng_from(1)).unwrap();
    let mut rows: Vec<f64> = s.data().to_vec();
    rows.sort_by(f64::total_cmp);
    rows.dedup();
    assert_eq!(rows.len(), 4);
    assert_eq!(buf.sample(50, &mut rng_from(1)).unwrap().shape(), &[6, 1]);
    assert!(ReplayBuffer::new(0).is_err());
}

fn minibatch(world: &GridWorld, cells: &[(usize, usize)], actions: Vec<usize>, old: Vec<f64>, adv: Vec<f64>, ret: Vec<f64>) -> PpoMinibatch {
    let rows: Vec<Vec<f64>> = cells.iter().map(|&c| world.encode(c)).collect();
    PpoMinibatch {
        states: Tensor::from_rows(&rows).unwrap(),
        actions,
        old_log_probs: old,
        advantages: adv,
        returns: ret,
    }
}

#[test]
fn clipped_surrogate_matches_hand_computation() {
    let world = tiny_world(0.0);
    let policy = init_model(&policy_spec(&world, 6), 4).unwrap();
    let cfg = PpoConfig::default();
    let cells = [(0, 1), (2, 0)];
    let rows: Vec<Vec<f64>> = cells.iter().map(|&c| world.encode(c)).collect();
    let (lp, values) = policy_eval(&policy, &Tensor::from_rows(&rows).unwrap()).unwrap();
    let actions = vec![2, 1];
    let cur = [lp[actions[0]], lp[ACTION_COUNT + actions[1]]];
    // Ratios of e^0.5 and e^-0.05: the first is clipped, the second is not.
    let old = vec![cur[0] - 0.5, cur[1] + 0.05];
    let adv = vec![1.3, -0.7];
    let ret = vec![0.2, -0.9];
    let mb = minibatch(&world, &cells, actions, old.clone(), adv.clone(), ret.clone());

    let mut surrogate = 0.0;
    for i in 0..2 {
        let ratio = (cur[i] - old[i]).exp();
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        surrogate += (ratio * adv[i]).min(clipped * adv[i]);
    }
    let policy_loss = -surrogate / 2.0;
    let value_loss = ((values[0] - ret[0]).powi(2) + (values[1] - ret[1]).powi(2)) / 2.0;
    let entropy = -lp.iter().map(|l| l.exp() * l).sum::<f64>() / 2.0;
    let total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy;

    let mut tape = Tape::new();
    let net = policy.bind(&mut tape, true);
    let loss = ppo_loss(&mut tape, &net, &mb, &cfg).unwrap();
    assert!((tape.value(loss.policy).item() - policy_loss).abs() <= 1e-12);
    assert!((tape.value(loss.value).item() - value_loss).abs() <= 1e-12);
    assert!((tape.value(loss.entropy).item() - entropy).abs() <= 1e-12);
    assert!((tape.value(loss.total).item() - total).abs() <= 1e-12);
    assert_eq!(loss.clip_fraction, 0.5);
}

#[test]
fn unit_ratio_surrogate_is_policy_gradient() {
    let world = tiny_world(0.0);
    let policy = init_model(&policy_spec(&world, 6), 8).unwrap();
    let mut cfg = PpoConfig::default();
    cfg.value_coef = 0.0;
    cfg.entropy_coef = 0.0;
    let cells = [(0, 0), (1, 0), (2, 1)];
    let rows: Vec<Vec<f64>> = cells.iter().map(|&c| world.encode(c)).collect();
    let (lp, _) = policy_eval(&policy, &Tensor::from_rows(&rows).unwrap()).unwrap();
    let actions = vec![0, 3, 1];
    let old: Vec<f64> = actions.iter().enumerate().map(|(i, &a)| lp[i * ACTION_COUNT + a]).collect();
    let adv = vec![0.5, -1.5, 1.0];
    let mb = minibatch(&world, &cells, actions.clone(), old, adv.clone(), vec![0.0; 3]);

    let mut tape = Tape::new();
    let net = policy.bind(&mut tape, true);
    let loss = ppo_loss(&mut tape, &net, &mb, &cfg).unwrap();
    assert_eq!(loss.clip_fraction, 0.0);
    assert!((tape.value(loss.policy).item() + adv.iter().sum::<f64>() / 3.0).abs() <= 1e-12);
    let g_ppo = tape.backward(loss.total).unwrap();

    // −mean(A · log π(a|s)).
    let mut tape2 = Tape::new();
    let net2 = policy.bind(&mut tape2, true);
    let x = tape2.constant(mb.states.clone());
    let logits = lot_core::model::forward_policy_logits(&mut tape2, &net2, x).unwrap();
    let lp = tape2.log_softmax_temp(logits, 1.0).unwrap();
    let taken = tape2.gather(lp, &actions).unwrap();
    let a = tape2.constant(Tensor::vector(adv).unwrap());
    let w = tape2.mul(taken, a).unwrap();
    let m = tape2.mean(w).unwrap();
    let pg = tape2.scale(m, -1.0).unwrap();
    let g_pg = tape2.backward(pg).unwrap();
    for (v1, v2) in net.vars.vars().iter().zip(net2.vars.vars()) {
        for (x, y) in g_ppo.get(*v1).unwrap().iter().zip(g_pg.get(*v2).unwrap()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

fn teacher_rollout(world: &GridWorld, policy: &Model, n: usize) -> RolloutBatch {
    let mut env = Env::new(world.clone(), 21).unwrap();
    collect_rollout(policy, &mut env, n, &mut rng_from(22)).unwrap()
}

#[test]
fn zero_alpha_update_equals_plain_ppo() {
    let world = GridWorld::standard(0.1);
    let spec = policy_spec(&world, 16);
    let mut cfg = small_cfg(1000);
    cfg.lot.alpha = 0.0;
    let t0 = init_model(&spec, 1).unwrap();
    let students = vec![init_model(&spec, 2).unwrap()];
    let batch = teacher_rollout(&world, &t0, 64);
    let mut replay = ReplayBuffer::new(64).unwrap();
    replay.push_rollout(&batch).unwrap();

    let (mut a, mut b) = (t0.clone(), t0.clone());
    let mut opt_a = OptimizerState::new(cfg.lot.teacher_optim).unwrap();
    let mut opt_b = opt_a.clone();
    let sa = ppo_update(&mut a, &mut opt_a, &batch, &cfg, None, &mut rng_from(3)).unwrap();
    let source = RegularizerSource {
        students: &students,
        replay: &replay,
        rng: &mut rng_from(4),
    };
    let sb = ppo_update(&mut b, &mut opt_b, &batch, &cfg, Some(source), &mut rng_from(3)).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(a.params, b.params);
    assert_eq!(sa.gradient_steps, 8);

    // With α > 0 the regularizer changes the update and reports μ.
    cfg.lot.alpha = 1.0;
    let mut c = t0.clone();
    let mut opt_c = OptimizerState::new(cfg.lot.teacher_optim).unwrap();
    let source = RegularizerSource {
        students: &students,
        replay: &replay,
        rng: &mut rng_from(4),
    };
    let sc = ppo_update(&mut c, &mut opt_c, &batch, &cfg, Some(source), &mut rng_from(3)).unwrap();
    assert_eq!(sc.mu.len(), 1);
    assert!(sc.regularizer > 0.0);
    assert_ne!(c.params, a.params);

    // An empty buffer skips R rather than failing.
    let empty = ReplayBuffer::new(8).unwrap();
    let mut d = t0.clone();
    let mut opt_d = OptimizerState::new(cfg.lot.teacher_optim).unwrap();
    let source = RegularizerSource {
        students: &students,
        replay: &empty,
        rng: &mut rng_from(4),
    };
    let sd = ppo_update(&mut d, &mut opt_d, &batch, &cfg, Some(source), &mut rng_from(3)).unwrap();
    assert!(sd.regularizer_skipped);
    assert_eq!(d.params, a.params);
}

#[test]
fn student_imitation_edge_cases() {
    let world = GridWorld::standard(0.1);
    let spec = policy_spec(&world, 16);
    let teacher = init_model(&spec, 1).unwrap();
    let batch = teacher_rollout(&world, &teacher, 64);
    let mut replay = ReplayBuffer::new(64).unwrap();
    let cfg = small_cfg(1000).lot;
    let mut opts = vec![OptimizerState::new(cfg.student_optim).unwrap()];

    let mut students = vec![init_model(&spec, 2).unwrap()];
    let before = students.clone();
    let out = student_imitate_rl(&mut students, &mut opts, &teacher, &replay, 3, &cfg, &mut rng_from(0)).unwrap();
    assert!(out.is_empty());
    assert_eq!(students, before);

    replay.push_rollout(&batch).unwrap();
    let out = student_imitate_rl(&mut students, &mut opts, &teacher, &replay, 0, &cfg, &mut rng_from(0)).unwrap();
    assert!(out.is_empty());
    assert_eq!(students, before);

    let mut copies = vec![teacher.clone()];
    let out = student_imitate_rl(&mut copies, &mut opts, &teacher, &replay, 3, &cfg, &mut rng_from(0)).unwrap();
    assert!(out.iter().all(|m| m[0] == 0.0));
    assert_eq!(copies[0], teacher);
}

#[test]
fn student_imitation_reduces_kl_on_a_frozen_teacher() {
    let world = GridWorld::standard(0.1);
    let spec = policy_spec(&world, 16);
    let mut improved = 0;
    for seed in 0..5 {
        let teacher = init_model(&spec, 100 + seed).unwrap();
        let mut scaled = teacher.clone();
        // Sharpen the teacher so there is something to imitate.
        for (name, t) in scaled.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect::<Vec<_>>() {
            if name.starts_with("policy") {
                let v: Vec<f64> = t.data().iter().map(|x| x * 300.0).collect();
                *scaled.params.get_mut(&name).unwrap() = Tensor::new(t.shape().to_vec(), v).unwrap();
            }
        }
        let batch = teacher_rollout(&world, &scaled, 256);
        let mut replay = ReplayBuffer::new(256).unwrap();
        replay.push_rollout(&batch).unwrap();
        let mut cfg = small_cfg(1000).lot;
        cfg.student_optim = OptimizerConfig::adam(0.01);
        let mut students = vec![init_model(&spec, 200 + seed).unwrap()];
        let mut opts = vec![OptimizerState::new(cfg.student_optim).unwrap()];
        let states = batch.states();
        let before = mean_kl_policy(&students[0], &scaled, &states);
        student_imitate_rl(&mut students, &mut opts, &scaled, &replay, 100, &cfg, &mut rng_from(seed)).unwrap();
        let after = mean_kl_policy(&students[0], &scaled, &states);
        if after < before {
            improved += 1;
        }
    }
    assert!(improved >= 4, "{improved}/5");
}

fn mean_kl_policy(student: &Model, teacher: &Model, states: &Tensor) -> f64 {
    let (ls, _) = policy_eval(student, states).unwrap();
    let (lt, _) = policy_eval(teacher, states).unwrap();
    let rows = states.shape()[0];
    let mut total = 0.0;
    for r in 0..rows {
        for a in 0..ACTION_COUNT {
            let (s, t) = (ls[r * ACTION_COUNT + a], lt[r * ACTION_COUNT + a]);
            total += s.exp() * (s - t);
        }
    }
    total / rows as f64
}

#[test]
fn lot_reduces_to_plain_ppo_and_keeps_env_parity() {
    let world = GridWorld::standard(0.1);
    let spec = policy_spec(&world, 16);
    let mut cfg = small_cfg(1000);
    cfg.lot.alpha = 0.0;
    cfg.lot.student_steps = 0;
    let plain = ppo_train(&cfg, &world, &spec, "run").unwrap();
    let reduced = lot_ppo_train(&cfg, &world, &spec, &spec, "run").unwrap();
    assert_eq!(plain.teacher, reduced.teacher);
    for name in ["episode_return", "policy_loss", "value_loss", "entropy", "eval_return"] {
        assert_eq!(plain.log.series(name), reduced.log.series(name), "{name}");
    }
    assert_eq!(plain.final_return, reduced.final_return);

    cfg.lot.alpha = 0.5;
    cfg.lot.student_steps = 2;
    let lot = lot_ppo_train(&cfg, &world, &spec, &spec, "run").unwrap();
    assert_eq!(plain.counters.teacher, 1000);
    assert_eq!(lot.counters.teacher, plain.counters.teacher);
    assert_eq!(lot.counters.student, 0);
    assert_eq!(plain.counters.student, 0);
    assert!(lot.eval_steps > 0);
    // ceil(1000 / 32) rollouts, two student steps after each.
    assert_eq!(lot.ppo_updates, 32);
    assert_eq!(lot.student_updates, 64);
    assert!(lot.log.last("regularizer").unwrap() > 0.0);
    assert!(lot.log.last("mu_s0_t").is_some());
    assert_ne!(lot.teacher, plain.teacher);
    let again = lot_ppo_train(&cfg, &world, &spec, &spec, "run").unwrap();
    assert_eq!(again.log.records(), lot.log.records());
}

#[test]
fn rl_specs_are_checked() {
    let world = GridWorld::standard(0.1);
    let cfg = small_cfg(100);
    let wrong_inputs = ModelSpec::PolicyValue {
        input_dim: 3,
        trunk: vec![4],
        activation: Activation::Tanh,
        actions: ACTION_COUNT,
    };
    assert!(ppo_train(&cfg, &world, &wrong_inputs, "x").is_err());
    let classifier = ModelSpec::default_mlp(world.feature_dim(), ACTION_COUNT);
    assert!(ppo_train(&cfg, &world, &classifier, "x").is_err());
    let mut bad = cfg.clone();
    bad.rollout_len = 0;
    assert!(ppo_train(&bad, &world, &policy_spec(&world, 4), "x").is_err());
}
