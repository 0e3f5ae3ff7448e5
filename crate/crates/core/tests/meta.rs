mod common;

use common::{two_params, Quadratic};

use cellseg::data::{sample_task, DomainDataset, TaskBatch};
use cellseg::meta::*;
use cellseg::models::{build_network, Architecture, NetworkSpec, ParamKind, ParameterVector};
use cellseg::optim::OptimizerKind;
use cellseg::{par, rng, Error};

fn sgd(lr: f64, steps: usize) -> MetaConfig {
    MetaConfig {
        inner_optimizer: OptimizerKind::Sgd,
        inner_lr: lr,
        inner_weight_decay: 0.0,
        inner_steps: steps,
        k: 2,
        ..MetaConfig::default()
    }
}

fn sources() -> Vec<DomainDataset> {
    vec![common::blobs("a", 16, 4, 1), common::blobs("b", 16, 4, 2), common::blobs("c", 16, 4, 3)]
}

fn batches(ds: &[DomainDataset], seed: u64) -> (TaskBatch<'_>, TaskBatch<'_>, TaskBatch<'_>) {
    let mut r = rng::stream(seed);
    (
        sample_task(&ds[0], 2, true, &mut r).unwrap(),
        sample_task(&ds[1], 2, false, &mut r).unwrap(),
        sample_task(&ds[2], 2, false, &mut r).unwrap(),
    )
}

#[test]
fn single_sgd_step_matches_the_analytic_update() {
    let q = Quadratic { a: 3.0, b: 0.5, c: 0.25, d: -1.5, poison: false };
    let theta = two_params(0.7, 0.1);
    let ds = sources();
    let (m, n, p) = batches(&ds, 0);
    let lr = 0.013;
    let (adapted, losses) = inner_adapt(&q, &theta, (&m, &n, &p), &sgd(lr, 1)).unwrap();
    let g = q.grad(theta.values());
    assert_eq!(adapted.values()[0].to_bits(), (0.7 - lr * g[0]).to_bits());
    assert_eq!(adapted.values()[1].to_bits(), (0.1 - lr * g[1]).to_bits());
    assert_eq!(losses.len(), 1);
    assert_eq!(theta.values(), &[0.7, 0.1]);
}

#[test]
fn meta_training_the_toy_model_with_unit_epsilon_follows_sgd() {
    let q = Quadratic { a: 2.0, b: 1.0, c: 1.0, d: -1.0, poison: false };
    let cfg = MetaConfig { outer_iterations: 4, ..sgd(0.1, 1) };
    let out = meta_train_from(&q, two_params(0.0, 0.0), &sources(), &cfg, |_, _| Ok(Control::Continue)).unwrap();
    // Every task takes the same step, so each episode is one SGD step.
    let mut v = [0.0f64, 0.0];
    for _ in 0..4 {
        let g = q.grad(&v);
        v = [v[0] - 0.1 * g[0], v[1] - 0.1 * g[1]];
    }
    assert_eq!(out.params.values(), &v);
    assert_eq!(out.logs.len(), 4);
}

#[test]
fn non_finite_loss_aborts_with_divergence() {
    let q = Quadratic { a: 1.0, b: 1.0, c: 0.0, d: 0.0, poison: true };
    let cfg = MetaConfig { outer_iterations: 2, ..sgd(0.1, 1) };
    let err = meta_train_from(&q, two_params(1.0, 1.0), &sources(), &cfg, |_, _| Ok(Control::Continue)).unwrap_err();
    assert!(matches!(err, Error::Divergence(_)));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn observer_can_stop_training() {
    let q = Quadratic { a: 1.0, b: 1.0, c: 0.0, d: 0.0, poison: false };
    let cfg = MetaConfig { outer_iterations: 10, ..sgd(0.1, 1) };
    let out = meta_train_from(&q, two_params(1.0, 1.0), &sources(), &cfg, |log, _| {
        Ok(if log.iteration == 2 { Control::Stop } else { Control::Continue })
    })
    .unwrap();
    assert_eq!(out.logs.len(), 3);
}

#[test]
fn a_single_source_is_a_configuration_error() {
    let q = Quadratic { a: 1.0, b: 1.0, c: 0.0, d: 0.0, poison: false };
    let one = vec![common::blobs("a", 16, 4, 1)];
    let err = meta_train_from(&q, two_params(0.0, 0.0), &one, &sgd(0.1, 1), |_, _| Ok(Control::Continue)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

fn small_net() -> (cellseg::models::SegmentationNetwork, ParameterVector) {
    build_network(&NetworkSpec::new(Architecture::Fcrn, 4, 2), 11).unwrap()
}

#[test]
fn zero_learning_rate_leaves_learnable_parameters_untouched() {
    let (net, theta) = small_net();
    let ds = sources();
    let (m, n, p) = batches(&ds, 1);
    let cfg = MetaConfig { inner_lr: 0.0, inner_steps: 3, ..MetaConfig::default() };
    let (adapted, _) = inner_adapt(&net, &theta, (&m, &n, &p), &cfg).unwrap();
    for (i, e) in theta.entries().iter().enumerate() {
        if !e.kind.is_running_stat() {
            assert_eq!(adapted.slice(i), theta.slice(i), "{}", e.name);
        }
    }
}

#[test]
fn composite_loss_decreases_during_inner_adaptation() {
    let (net, theta) = small_net();
    let ds = sources();
    let (m, n, p) = batches(&ds, 2);
    let cfg = MetaConfig { inner_steps: 20, inner_lr: 0.01, ..MetaConfig::default() };
    let (_, losses) = inner_adapt(&net, &theta, (&m, &n, &p), &cfg).unwrap();
    assert!(losses[19].total < losses[0].total, "{} → {}", losses[0].total, losses[19].total);
}

#[test]
fn meta_training_is_reproducible_and_mode_independent() {
    let spec = NetworkSpec::new(Architecture::UNetLight, 4, 2);
    let cfg = MetaConfig { outer_iterations: 3, k: 2, inner_steps: 2, seed: 9, ..MetaConfig::default() };
    let ds = sources();
    let runs: Vec<ParameterVector> = [true, false, true]
        .into_iter()
        .map(|on| {
            par::set_parallel(on);
            meta_train(&ds, &spec, &cfg).unwrap().1.params
        })
        .collect();
    par::set_parallel(true);
    assert!(runs[0].bit_eq(&runs[1]));
    assert!(runs[0].bit_eq(&runs[2]));
    let other = meta_train(&ds, &spec, &MetaConfig { seed: 10, ..cfg }).unwrap().1.params;
    assert!(!other.bit_eq(&runs[0]));
}

#[test]
fn resumed_meta_training_matches_an_uninterrupted_run() {
    let (net, theta) = small_net();
    let ds = sources();
    let cfg = MetaConfig { outer_iterations: 4, k: 2, inner_steps: 2, seed: 3, ..MetaConfig::default() };
    let full = meta_train_from(&net, theta.clone(), &ds, &cfg, |_, _| Ok(Control::Continue)).unwrap();
    let half = meta_train_from(&net, theta, &ds, &MetaConfig { outer_iterations: 2, ..cfg.clone() }, |_, _| {
        Ok(Control::Continue)
    })
    .unwrap();
    let resumed = meta_train_resume(&net, half.params, &ds, &cfg, 2, |_, _| Ok(Control::Continue)).unwrap();
    assert!(resumed.params.bit_eq(&full.params));
    assert_eq!(resumed.logs, full.logs[2..]);
}

#[test]
fn batch_norm_affine_parameters_stay_frozen() {
    let (net, theta) = small_net();
    let cfg = MetaConfig { outer_iterations: 3, k: 2, inner_steps: 2, ..MetaConfig::default() };
    let out = meta_train_from(&net, theta.clone(), &sources(), &cfg, |_, _| Ok(Control::Continue)).unwrap();
    let mut moved = false;
    for (i, e) in theta.entries().iter().enumerate() {
        let same = out.params.slice(i).iter().zip(theta.slice(i)).all(|(a, b)| a.to_bits() == b.to_bits());
        if e.kind.is_bn_affine() {
            assert!(same, "{} moved", e.name);
        } else if e.kind == ParamKind::Weight {
            moved |= !same;
        }
    }
    assert!(moved);
}

#[test]
fn running_statistics_can_be_reset_per_task() {
    let (net, mut theta) = small_net();
    for (i, e) in theta.entries().to_vec().iter().enumerate() {
        if e.kind == ParamKind::RunningMean {
            theta.slice_mut(i).fill(5.0);
        }
    }
    let ds = sources();
    let (m, n, p) = batches(&ds, 4);
    let cfg = MetaConfig { inner_steps: 1, reset_running_stats_per_task: true, ..MetaConfig::default() };
    let (reset, _) = inner_adapt(&net, &theta, (&m, &n, &p), &cfg).unwrap();
    let (carried, _) =
        inner_adapt(&net, &theta, (&m, &n, &p), &MetaConfig { reset_running_stats_per_task: false, ..cfg }).unwrap();
    let idx = theta.entries().iter().position(|e| e.kind == ParamKind::RunningMean).unwrap();
    assert!(reset.slice(idx).iter().zip(carried.slice(idx)).all(|(r, c)| (c - r - 0.9 * 5.0).abs() < 1e-9));
}

#[test]
fn early_stopping_keeps_the_best_holdout_parameters() {
    let spec = NetworkSpec::new(Architecture::Fcrn, 4, 2);
    let cfg = MetaConfig {
        outer_iterations: 6,
        k: 2,
        inner_steps: 1,
        early_stop: Some(EarlyStopConfig { holdout_fraction: 0.25, eval_every: 1, patience: 1 }),
        ..MetaConfig::default()
    };
    let (_, out) = meta_train(&sources(), &spec, &cfg).unwrap();
    assert!(!out.logs.is_empty() && out.logs.len() <= 6);
    assert!(out.params.is_finite());
}

#[test]
fn episode_logs_serialize_with_loss_breakdowns() {
    let (net, theta) = small_net();
    let cfg = MetaConfig { outer_iterations: 1, k: 2, inner_steps: 1, ..MetaConfig::default() };
    let (_, log) = run_episode(&net, &theta, &sources(), &cfg, 0).unwrap();
    assert_eq!(log.task_losses.len(), 3);
    assert!(log.meta_update_norm > 0.0);
    let json = serde_json::to_value(&log).unwrap();
    assert!(json["losses"][0]["bce"].as_f64().unwrap() > 0.0);
}
