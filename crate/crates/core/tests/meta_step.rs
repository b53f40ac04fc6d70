use lava_core::adaptation::{fuse_nodes, head_point_steps};
use lava_core::model::{features, head};
use lava_core::tasks::{TaskBatch, TaskDescriptor, TaskFamily, TaskSource};
use lava_core::training::{
    evaluate, evaluation_tasks, init_params, meta_train, outer_gradient, task_query_mse, training_batches, AdamState,
    HyperConfig, Method,
};
use lava_core::{Graph, MetaParams, SeedTree, Tape, Tensor};
use rand::{Rng, SeedableRng};

const SINE: TaskSource = TaskSource::Family(TaskFamily::Sine);

/// Outer gradient of the last-layer objective when every per-point
/// precision is replaced by the identity.
fn equal_precision_gradient(meta: &MetaParams, batches: &[TaskBatch], alpha: f64) -> Vec<Tensor> {
    let mut sum: Vec<Tensor> = meta.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
    for b in batches {
        let mut tape = Tape::new();
        let p = meta.leaves(&mut tape);
        let xs = tape.constant(b.support_x.clone());
        let ys = tape.constant(b.support_y.clone());
        let xq = tape.constant(b.query_x.clone());
        let yq = tape.constant(b.query_y.clone());
        let zs = features(&mut tape, &p, &xs).unwrap();
        let zq = features(&mut tape, &p, &xq).unwrap();
        let steps = head_point_steps(&mut tape, &p.head, &zs, &ys, alpha).unwrap();
        let m = meta.head.cols();
        let eyes = vec![Tensor::eye(m); steps.len()];
        let theta = fuse_nodes(&mut tape, &steps, &eyes).unwrap();
        let pred = head(&mut tape, &theta, &zq).unwrap();
        let loss = tape.mse(&pred, &yq).unwrap();
        let grads = tape.backward(loss).unwrap();
        for ((acc, v), like) in sum.iter_mut().zip(p.in_order()).zip(meta.tensors()) {
            *acc = acc.add(&grads.wrt(v, like).scale(1.0 / batches.len() as f64).unwrap()).unwrap();
        }
    }
    sum
}

#[test]
fn equal_precision_meta_step_is_the_baseline_meta_step() {
    let cfg = HyperConfig {
        mode: Method::AnilBaseline,
        hidden: vec![16, 16],
        meta_batch: 4,
        ..HyperConfig::default()
    };
    let params = init_params(&cfg, &SINE).unwrap();
    let batches = training_batches(&cfg, &SINE, 0).unwrap();
    let baseline = outer_gradient(&params, &batches, &cfg).unwrap().grads;
    let fused = equal_precision_gradient(&params, &batches, cfg.alpha);

    let mut adam_a = AdamState::new(&params);
    let mut adam_b = AdamState::new(&params);
    let next_a = adam_a.step(&params, &baseline, cfg.outer_lr).unwrap();
    let next_b = adam_b.step(&params, &fused, cfg.outer_lr).unwrap();
    for (a, b) in next_a.tensors().iter().zip(next_b.tensors()) {
        assert!(a.max_abs_diff(b) < 1e-10, "{}", a.max_abs_diff(b));
    }
    for (a, b) in baseline.iter().zip(&fused) {
        assert!(a.max_abs_diff(b) < 1e-10);
    }
}

#[test]
fn baseline_outer_gradients_match_finite_differences() {
    for (mode, steps) in [(Method::AnilBaseline, 1), (Method::AnilBaseline, 3), (Method::CaviaBaseline, 2)] {
        let cfg = HyperConfig {
            mode,
            inner_steps: steps,
            hidden: vec![4, 4],
            support: 5,
            query: 7,
            meta_batch: 3,
            ..HyperConfig::default()
        };
        let params = init_params(&cfg, &SINE).unwrap();
        let batches = training_batches(&cfg, &SINE, 2).unwrap();
        let analytic = outer_gradient(&params, &batches, &cfg).unwrap().grads;
        let loss = |p: &MetaParams| {
            batches.iter().map(|b| task_query_mse(p, b, &cfg).unwrap()).sum::<f64>() / batches.len() as f64
        };
        let h = 1e-6;
        for (t, g) in analytic.iter().enumerate() {
            for e in 0..g.len() {
                let shifted = |delta: f64| {
                    let mut ts: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
                    let cols = ts[t].cols();
                    ts[t][(e / cols, e % cols)] += delta;
                    loss(&MetaParams::from_tensors(&params.arch, params.mode, ts).unwrap())
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                let an = g.data()[e];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "{mode} x{steps} tensor {t} entry {e}: fd {fd} vs {an}");
            }
        }
    }
}

#[test]
fn zero_predictor_error_matches_sine_energy() {
    // With a zero head and a single inner step of negligible size, predictions
    // stay at zero, so the query MSE is the mean of A² sin²(x + φ).
    let cfg = HyperConfig {
        mode: Method::AnilBaseline,
        hidden: vec![8],
        alpha: 1e-300,
        ..HyperConfig::default()
    };
    let mut params = init_params(&cfg, &SINE).unwrap();
    params.head = Tensor::zeros(1, params.head.cols());
    let tasks = evaluation_tasks(&SINE, 21, 20_000, 10, 25).unwrap();
    let mse = evaluate(&params, &tasks, &cfg).unwrap().mean;
    // E[A²] for A ~ U[0.1, 5] and E[sin²(x + φ)] for x ~ U[-5, 5], φ ~ U[0, π]
    let (a, b) = (0.1f64, 5.0f64);
    let e_a2 = (b.powi(3) - a.powi(3)) / (3.0 * (b - a));
    let expected = e_a2 * 0.5;
    assert!((mse - expected).abs() / expected < 0.02, "{mse} vs {expected}");
}

#[test]
fn perfect_model_scores_zero() {
    // a constant target is fit exactly by the head bias when every hidden unit is zero
    let cfg = HyperConfig {
        mode: Method::AnilBaseline,
        hidden: vec![4],
        ..HyperConfig::default()
    };
    let mut params = init_params(&cfg, &SINE).unwrap();
    params.hidden[0].weight = Tensor::zeros(1, 4);
    params.hidden[0].bias = Tensor::zeros(1, 4);
    params.head = Tensor::row_vector(&[0.3, -0.2, 0.1, 0.7, 1.5]);
    let x = Tensor::col_vector(&[0.5, -1.0, 2.0]);
    let y = Tensor::filled(3, 1, 1.5);
    let batch = TaskBatch {
        support_x: x.clone(),
        support_y: y.clone(),
        query_x: x,
        query_y: y,
        descriptor: TaskDescriptor::Sine { amplitude: 0.0, phase: 0.0 },
    };
    let s = evaluate(&params, &[batch], &cfg).unwrap();
    assert_eq!(s.mean, 0.0);
    assert_eq!(s.std, 0.0);
}

#[test]
fn training_reduces_query_error() {
    let cfg = HyperConfig {
        hidden: vec![32, 32],
        epochs: 5,
        tasks_per_epoch: 40,
        variance_resamples: 0,
        ..HyperConfig::default()
    };
    let out = meta_train(&cfg, &SINE).unwrap();
    let first = out.log.first().unwrap().mean_query_mse;
    let last = out.log.last().unwrap().mean_query_mse;
    assert!(last < first, "{first} -> {last}");
    let tasks = evaluation_tasks(&SINE, 99, 100, 10, 25).unwrap();
    let before = evaluate(&init_params(&cfg, &SINE).unwrap(), &tasks, &cfg).unwrap().mean;
    let after = evaluate(&out.params, &tasks, &cfg).unwrap().mean;
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn logged_tasks_regenerate_from_seed_and_index() {
    let cfg = HyperConfig { meta_batch: 3, ..HyperConfig::default() };
    let first = training_batches(&cfg, &SINE, 7).unwrap();
    let again = training_batches(&cfg, &SINE, 7).unwrap();
    assert_eq!(first, again);
    let direct = SINE.batch(SeedTree::new(cfg.seed).child("train"), 7 * 3 + 1, cfg.support, cfg.query).unwrap();
    assert_eq!(first[1], direct);
    // gradient evaluation reads the batch without changing it
    let params = init_params(&cfg, &SINE).unwrap();
    let snapshot = first.clone();
    outer_gradient(&params, &first, &cfg).unwrap();
    assert_eq!(first, snapshot);
}

#[test]
fn adam_runs_are_bitwise_reproducible() {
    let cfg = HyperConfig { hidden: vec![8], ..HyperConfig::default() };
    let params = init_params(&cfg, &SINE).unwrap();
    let run = || {
        let mut adam = AdamState::new(&params);
        let mut p = params.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let grads: Vec<Tensor> = p
                .tensors()
                .iter()
                .map(|t| Tensor::from_fn(t.rows(), t.cols(), |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            p = adam.step(&p, &grads, 1e-3).unwrap();
        }
        (p, adam.step)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(sa, 5);
    assert_eq!(sa, sb);
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        assert_eq!(x.data(), y.data());
    }
}
