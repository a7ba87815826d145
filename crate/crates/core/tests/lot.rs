use lot_autodiff::{OptimizerConfig, Tape, Tensor};
use lot_core::data::{gen_gaussian_split, gen_markov_split, gen_spirals, ClusterParams};
use lot_core::model::{init_model, Activation, ModelSpec};
use lot_core::train::{
    ban_distill, count_updates, imitability, imitate_only_train, lot_regularizer, lot_train, mean_kl,
    regularizer_from_logits, student_loss, teacher_loss, teacher_only_train, BanConfig, BatchInputs, ImitateConfig,
    KlDirection, LabeledBatch, LotConfig, MetricKind, RunRole, RunSeeds, Task,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn softmax(row: &[f64], t: f64) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - m) / t).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Direct summation of a row-averaged imitability.
fn mu_oracle(kind: MetricKind, a: &[Vec<f64>], b: &[Vec<f64>], t: f64) -> f64 {
    let mut total = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        let (pa, pb) = (softmax(ra, t), softmax(rb, t));
        total += match kind {
            MetricKind::Kl => pa.iter().zip(&pb).map(|(p, q)| p * (p.ln() - q.ln())).sum::<f64>(),
            MetricKind::L2 => pa.iter().zip(&pb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>(),
        };
    }
    total / a.len() as f64
}

fn spiral_task(seed: u64) -> Task {
    let train = gen_spirals(3, 40, 0.1, seed).unwrap();
    let test = gen_spirals(3, 40, 0.1, seed + 1000).unwrap();
    let student = train.unlabeled();
    Task::classification(train, student, test).unwrap()
}

fn small_mlp() -> ModelSpec {
    ModelSpec::Mlp {
        input_dim: 2,
        hidden: vec![16],
        activation: Activation::Relu,
        classes: 3,
    }
}

fn quick_cfg(budget: u64, n: usize, alpha: f64) -> LotConfig {
    LotConfig {
        alpha,
        student_steps: n,
        total_update_budget: budget,
        teacher_optim: OptimizerConfig::adam(0.01),
        student_optim: OptimizerConfig::adam(0.01),
        eval_every: Some(10),
        ..LotConfig::default()
    }
}

#[test]
fn imitability_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![0.5f64.ln(), 0.5f64.ln()]).unwrap());
    let b = tape.constant(Tensor::vector(vec![0.25f64.ln(), 0.75f64.ln()]).unwrap());
    let kl = imitability(&mut tape, MetricKind::Kl, a, b, 1.0).unwrap();
    let l2 = imitability(&mut tape, MetricKind::L2, a, b, 1.0).unwrap();
    let expect = mu_oracle(MetricKind::Kl, &[vec![0.5f64.ln(), 0.5f64.ln()]], &[vec![0.25f64.ln(), 0.75f64.ln()]], 1.0);
    assert!((tape.value(kl).item() - expect).abs() < 1e-12);
    assert!((tape.value(kl).item() - 0.1438).abs() < 1e-4);
    assert!((tape.value(l2).item() - 0.125).abs() < 1e-12);
    let rev = imitability(&mut tape, MetricKind::Kl, b, a, 1.0).unwrap();
    assert!((tape.value(rev).item() - tape.value(kl).item()).abs() > 1e-3);
    for kind in [MetricKind::Kl, MetricKind::L2] {
        let same = imitability(&mut tape, kind, a, a, 1.5).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }
}

#[test]
fn regularizer_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 1..=3 {
        for kind in [MetricKind::Kl, MetricKind::L2] {
            for _ in 0..5 {
                let rows = 4;
                let classes = 5;
                let mut draw = || -> Vec<Vec<f64>> {
                    (0..rows).map(|_| (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
                };
                let teacher = draw();
                let students: Vec<Vec<Vec<f64>>> = (0..k).map(|_| draw()).collect();
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
                let z: f64 = raw.iter().sum();
                let lambdas: Vec<f64> = raw.iter().map(|v| v / z).collect();
                let alpha = rng.random_range(0.0..2.0);
                let temperature = rng.random_range(0.5..3.0);
                let cfg = LotConfig {
                    alpha,
                    lambdas: lambdas.clone(),
                    temperature,
                    metric: kind,
                    seeds: RunSeeds::from_master(0, k),
                    ..LotConfig::default()
                };
                let mut tape = Tape::new();
                let t = tape.param(Tensor::from_rows(&teacher).unwrap());
                let s: Vec<_> = students.iter().map(|r| tape.param(Tensor::from_rows(r).unwrap())).collect();
                let (r, mus) = regularizer_from_logits(&mut tape, t, &s, &cfg).unwrap();
                let mut expect = 0.0;
                for i in 0..k {
                    let m = mu_oracle(kind, &teacher, &students[i], temperature);
                    assert!((mus[i] - m).abs() <= 1e-9);
                    expect += lambdas[i] * m;
                }
                expect *= alpha;
                assert!((tape.value(r).item() - expect).abs() <= 1e-9, "K={k} {kind:?}");
            }
        }
    }
}

#[test]
fn regularizer_special_cases() {
    let teacher = vec![vec![1.0, -2.0, 0.5], vec![0.1, 0.2, 0.3]];
    let other = vec![vec![0.0, 1.0, 0.5], vec![2.0, 0.2, -0.3]];
    let mut tape = Tape::new();
    let t = tape.param(Tensor::from_rows(&teacher).unwrap());
    let o = tape.param(Tensor::from_rows(&other).unwrap());
    let zero_alpha = LotConfig {
        alpha: 0.0,
        ..LotConfig::default()
    };
    let (r, _) = regularizer_from_logits(&mut tape, t, &[o], &zero_alpha).unwrap();
    assert_eq!(tape.value(r).item(), 0.0);
    let (r, _) = regularizer_from_logits(&mut tape, t, &[t], &LotConfig::default()).unwrap();
    assert_eq!(tape.value(r).item(), 0.0);
    assert!(regularizer_from_logits(&mut tape, t, &[t, o], &LotConfig::default()).is_err());
    // The regularizer is the lambda-weighted average of single-student ones.
    let two = LotConfig {
        lambdas: vec![0.3, 0.7],
        seeds: RunSeeds::from_master(0, 2),
        ..LotConfig::default()
    };
    let (r2, _) = regularizer_from_logits(&mut tape, t, &[o, t], &two).unwrap();
    let (r1, _) = regularizer_from_logits(&mut tape, t, &[o], &LotConfig::default()).unwrap();
    assert!((tape.value(r2).item() - 0.3 * tape.value(r1).item()).abs() <= 1e-12);
    // Student-first direction swaps the KL arguments.
    let sf = LotConfig {
        direction: KlDirection::StudentFirst,
        ..LotConfig::default()
    };
    let (rs, _) = regularizer_from_logits(&mut tape, t, &[o], &sf).unwrap();
    let expect = mu_oracle(MetricKind::Kl, &other, &teacher, 1.5);
    assert!((tape.value(rs).item() - expect).abs() <= 1e-12);
}

fn features(rows: &[Vec<f64>]) -> BatchInputs {
    BatchInputs::Features(Tensor::from_rows(rows).unwrap())
}

#[test]
fn teacher_loss_is_nll_plus_regularizer() {
    let spec = small_mlp();
    let teacher = init_model(&spec, 1).unwrap();
    let students = [init_model(&spec, 2).unwrap(), init_model(&spec, 3).unwrap()];
    let cfg = LotConfig::default().with_students(2, 0);
    let bt = LabeledBatch {
        inputs: features(&[vec![0.1, 0.2], vec![-0.5, 0.3], vec![0.9, -0.9]]),
        targets: vec![0, 2, 1],
    };
    let bs = features(&[vec![0.4, 0.4], vec![-0.2, 0.8]]);
    let mut tape = Tape::new();
    let t = teacher.bind(&mut tape, true);
    let s: Vec<_> = students.iter().map(|m| m.bind(&mut tape, true)).collect();
    let loss = teacher_loss(&mut tape, &t, &s, &bt, &bs, &cfg).unwrap();
    let sum = tape.value(loss.nll).item() + tape.value(loss.regularizer).item();
    assert!((tape.value(loss.total).item() - sum).abs() <= 1e-9);
    let (r, _) = lot_regularizer(&mut tape, &t, &s, &bs, &cfg).unwrap();
    assert_eq!(tape.value(r).item(), tape.value(loss.regularizer).item());

    let plain = LotConfig {
        alpha: 0.0,
        ..cfg.clone()
    };
    let loss0 = teacher_loss(&mut tape, &t, &s, &bt, &bs, &plain).unwrap();
    assert_eq!(tape.value(loss0.total).item(), tape.value(loss0.nll).item());
}

#[test]
fn losses_isolate_gradients_on_a_joint_tape() {
    let spec = small_mlp();
    let teacher = init_model(&spec, 1).unwrap();
    let students = [init_model(&spec, 2).unwrap(), init_model(&spec, 3).unwrap()];
    let cfg = LotConfig::default().with_students(2, 0);
    let bt = LabeledBatch {
        inputs: features(&[vec![0.1, 0.2], vec![-0.5, 0.3]]),
        targets: vec![0, 2],
    };
    let bs = features(&[vec![0.4, 0.4], vec![-0.2, 0.8], vec![1.0, 0.0]]);
    let mut tape = Tape::new();
    let t = teacher.bind(&mut tape, true);
    let s: Vec<_> = students.iter().map(|m| m.bind(&mut tape, true)).collect();

    let tl = teacher_loss(&mut tape, &t, &s, &bt, &bs, &cfg).unwrap();
    let g = tape.backward(tl.total).unwrap();
    for net in &s {
        for &v in net.vars.vars() {
            assert!(g.get(v).unwrap().iter().all(|&x| x == 0.0));
        }
    }
    assert!(t.vars.vars().iter().any(|&v| g.get(v).unwrap().iter().any(|&x| x != 0.0)));

    let (sl, _) = student_loss(&mut tape, &s, &t, &bs, &cfg).unwrap();
    let g = tape.backward(sl).unwrap();
    for &v in t.vars.vars() {
        assert!(g.get(v).unwrap().iter().all(|&x| x == 0.0));
    }
    for net in &s {
        assert!(net.vars.vars().iter().any(|&v| g.get(v).unwrap().iter().any(|&x| x != 0.0)));
    }
}

#[test]
fn student_loss_is_additive_and_zero_on_copies() {
    let spec = small_mlp();
    let teacher = init_model(&spec, 1).unwrap();
    let a = init_model(&spec, 2).unwrap();
    let b = init_model(&spec, 3).unwrap();
    let bs = features(&[vec![0.4, 0.4], vec![-0.2, 0.8]]);
    let mut tape = Tape::new();
    let t = teacher.bind(&mut tape, false);
    let (na, nb) = (a.bind(&mut tape, true), b.bind(&mut tape, true));
    let one = LotConfig::default();
    let two = LotConfig::default().with_students(2, 0);
    let (la, _) = student_loss(&mut tape, &[na.clone()], &t, &bs, &one).unwrap();
    let (lb, _) = student_loss(&mut tape, &[nb.clone()], &t, &bs, &one).unwrap();
    let (lab, _) = student_loss(&mut tape, &[na, nb], &t, &bs, &two).unwrap();
    assert!((tape.value(lab).item() - tape.value(la).item() - tape.value(lb).item()).abs() <= 1e-12);
    let copy = teacher.bind(&mut tape, true);
    let (l0, _) = student_loss(&mut tape, &[copy], &t, &bs, &one).unwrap();
    assert_eq!(tape.value(l0).item(), 0.0);
}

#[test]
fn budget_accounting() {
    let task = spiral_task(1);
    let out = lot_train(&quick_cfg(40, 1, 1.0), &task, &small_mlp(), &small_mlp(), "a").unwrap();
    assert_eq!(count_updates(&out.state), (20, 20, 40));
    assert_eq!(out.log.last("partial_final_iteration"), Some(0.0));

    let out = lot_train(&quick_cfg(23, 4, 1.0), &task, &small_mlp(), &small_mlp(), "b").unwrap();
    assert_eq!(count_updates(&out.state), (5, 18, 23));
    assert_eq!(out.log.last("partial_final_iteration"), Some(1.0));

    assert!(lot_train(&quick_cfg(4, 4, 1.0), &task, &small_mlp(), &small_mlp(), "c").is_err());

    let to = teacher_only_train(&quick_cfg(23, 4, 1.0), &task, &small_mlp(), "d").unwrap();
    assert_eq!(count_updates(&to.state), (23, 0, 23));
}

#[test]
fn zero_alpha_zero_n_reduces_to_teacher_only() {
    let task = spiral_task(2);
    let cfg = quick_cfg(60, 0, 0.0);
    let lot = lot_train(&cfg, &task, &small_mlp(), &small_mlp(), "r").unwrap();
    let plain = teacher_only_train(&cfg, &task, &small_mlp(), "r").unwrap();
    assert_eq!(lot.state.teacher.params, plain.state.teacher.params);
    for name in ["test_accuracy", "test_nll", "train_loss"] {
        assert_eq!(lot.log.series(name), plain.log.series(name), "{name}");
    }
}

#[test]
fn runs_are_deterministic() {
    let task = spiral_task(3);
    let cfg = quick_cfg(30, 2, 1.0).with_students(2, 9);
    let a = lot_train(&cfg, &task, &small_mlp(), &small_mlp(), "x").unwrap();
    let b = lot_train(&cfg, &task, &small_mlp(), &small_mlp(), "x").unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.state.students[1].params, b.state.students[1].params);
}

#[test]
fn teacher_only_loss_decreases_on_separable_data() {
    let p = ClusterParams {
        class_count: 3,
        dim: 4,
        per_class_count: 60,
        cluster_spread: 0.2,
        label_noise_rate: 0.0,
    };
    let (train, test) = gen_gaussian_split(&p, 20, 5).unwrap();
    let task = Task::classification(train.clone(), train.unlabeled(), test).unwrap();
    let spec = ModelSpec::Mlp {
        input_dim: 4,
        hidden: vec![16],
        activation: Activation::Relu,
        classes: 3,
    };
    let cfg = LotConfig {
        total_update_budget: 400,
        teacher_optim: OptimizerConfig::sgd(0.02),
        eval_every: Some(40),
        ..LotConfig::default()
    };
    let out = teacher_only_train(&cfg, &task, &spec, "s").unwrap();
    let losses: Vec<f64> = out.log.series("train_loss").iter().map(|p| p.1).collect();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "{losses:?}");
    }
}

#[test]
fn ban_with_hard_loss_only_is_teacher_only() {
    let task = spiral_task(4);
    let cfg = quick_cfg(50, 1, 1.0);
    let teacher = teacher_only_train(&cfg, &task, &small_mlp(), "t").unwrap();
    let mut same_init = cfg.clone();
    same_init.seeds.student_init[0] = cfg.seeds.teacher_init;
    let hard = BanConfig {
        hard_weight: 1.0,
        soft_weight: 0.0,
        temperature: 1.5,
    };
    let ban = ban_distill(Some(&teacher.best.unwrap().model), &small_mlp(), &task, &same_init, &hard, "b").unwrap();
    assert_eq!(ban.state.teacher.params, teacher.state.teacher.params);
    assert_eq!(count_updates(&ban.state).2, 50);
    assert!(ban_distill(None, &small_mlp(), &task, &cfg, &BanConfig::default(), "b").is_err());
}

#[test]
fn best_checkpoint_prefers_earliest_tie() {
    let task = spiral_task(5);
    // A vanishing learning rate leaves every evaluation identical.
    let cfg = LotConfig {
        teacher_optim: OptimizerConfig::sgd(1e-300),
        ..quick_cfg(30, 0, 0.0)
    };
    let out = teacher_only_train(&cfg, &task, &small_mlp(), "t").unwrap();
    assert_eq!(out.best.unwrap().step, 10);
}

#[test]
fn imitation_from_identical_init_stays_at_zero() {
    let d = gen_spirals(3, 30, 0.1, 1).unwrap();
    let teacher = init_model(&small_mlp(), 4).unwrap();
    let cfg = ImitateConfig {
        steps: 20,
        batch: 16,
        optim: OptimizerConfig::sgd(0.1),
        temperature: 1.0,
        eval_every: 5,
        order_seed: 1,
    };
    let out = imitate_only_train(&teacher, teacher.clone(), &d.inputs, &d.inputs, &cfg, RunRole::ImitateSophisticated, "i")
        .unwrap();
    assert!(out.curve.iter().all(|&(_, a, b)| a == 0.0 && b == 0.0));
    assert_eq!(out.student.params, teacher.params);
}

#[test]
fn imitation_reduces_train_kl() {
    let d = gen_spirals(3, 40, 0.1, 2).unwrap();
    let mut improved = 0;
    for seed in 0..5 {
        let teacher = init_model(&small_mlp(), 100 + seed).unwrap();
        let student = init_model(&small_mlp(), 200 + seed).unwrap();
        let cfg = ImitateConfig {
            steps: 100,
            batch: 32,
            optim: OptimizerConfig::sgd(0.05),
            temperature: 1.0,
            eval_every: 20,
            order_seed: seed,
        };
        let out = imitate_only_train(&teacher, student, &d.inputs, &d.inputs, &cfg, RunRole::ImitateDeceptive, "i")
            .unwrap();
        let first = out.curve.first().unwrap().1;
        let last = out.curve.last().unwrap().1;
        assert!((last - mean_kl(&out.student, &teacher, &d.inputs, 1.0).unwrap()).abs() < 1e-15);
        if last < first {
            improved += 1;
        }
    }
    assert!(improved >= 4, "{improved}");
}

#[test]
fn language_task_respects_entropy_floor() {
    let (train, test) = gen_markov_split(8, 3000, 2000, 0.5, 3).unwrap();
    let task = Task::language(&train, &test, 16).unwrap();
    let spec = ModelSpec::Rnn {
        vocab: 8,
        hidden: 12,
        window: 8,
    };
    let cfg = LotConfig {
        total_update_budget: 60,
        teacher_batch: 8,
        student_batch: 8,
        teacher_optim: OptimizerConfig::adam(0.01),
        student_optim: OptimizerConfig::adam(0.01),
        eval_every: Some(10),
        ..LotConfig::default()
    };
    let out = lot_train(&cfg, &task, &spec, &spec, "lm").unwrap();
    let floor = task.entropy().unwrap().exp();
    for (_, p) in out.log.series("test_perplexity") {
        assert!(p >= floor - 1e-6);
    }
    assert_eq!(count_updates(&out.state).2, 60);
}

#[test]
fn mismatched_specs_are_rejected() {
    let task = spiral_task(1);
    let wrong = ModelSpec::Mlp {
        input_dim: 3,
        hidden: vec![4],
        activation: Activation::Relu,
        classes: 3,
    };
    assert!(lot_train(&quick_cfg(10, 1, 1.0), &task, &wrong, &small_mlp(), "w").is_err());
    let bad_lambda = LotConfig {
        lambdas: vec![0.5, 0.6],
        seeds: RunSeeds::from_master(0, 2),
        ..quick_cfg(10, 1, 1.0)
    };
    assert!(lot_train(&bad_lambda, &task, &small_mlp(), &small_mlp(), "w").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn regularizer_is_lambda_convex(seed in any::<u64>(), l0 in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> Tensor {
            Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap()
        };
        let (tv, av, bv) = (draw(), draw(), draw());
        let mut tape = Tape::new();
        let t = tape.constant(tv);
        let a = tape.constant(av);
        let b = tape.constant(bv);
        let two = LotConfig { lambdas: vec![l0, 1.0 - l0], seeds: RunSeeds::from_master(0, 2), ..LotConfig::default() };
        let (r2, _) = regularizer_from_logits(&mut tape, t, &[a, b], &two).unwrap();
        let (ra, _) = regularizer_from_logits(&mut tape, t, &[a], &LotConfig::default()).unwrap();
        let (rb, _) = regularizer_from_logits(&mut tape, t, &[b], &LotConfig::default()).unwrap();
        let expect = l0 * tape.value(ra).item() + (1.0 - l0) * tape.value(rb).item();
        prop_assert!((tape.value(r2).item() - expect).abs() <= 1e-9);
    }

    #[test]
    fn budget_is_always_exact(budget in 3u64..40, n in 0usize..3) {
        let task = spiral_task(7);
        let out = lot_train(&quick_cfg(budget, n, 0.5), &task, &small_mlp(), &small_mlp(), "p").unwrap();
        prop_assert_eq!(count_updates(&out.state).2, budget);
    }
}
