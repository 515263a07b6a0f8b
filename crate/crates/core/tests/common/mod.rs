//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tenet_core::model::{BatchEntry, LossTerm, TrainBatch};
use tenet_core::{ModelConfig, TenetModel, Variant};

pub const FD_EPS: f64 = 1e-5;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], eps: f64, mut f: F) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let up = f(&p);
            p[i] = orig - eps;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// A model small enough for exhaustive finite differences.
pub fn tiny_config(variant: Variant, lambda_g: f64) -> ModelConfig {
    ModelConfig {
        d_z: 6,
        d_e: 3,
        proj_hidden: vec![4],
        hyper_hidden: vec![5],
        policy_hidden: vec![3],
        traj_feature_hidden: vec![4],
        traj_feature_dim: 3,
        traj_head_hidden: vec![3],
        state_dim: 2,
        action_dim: 1,
        hyper_output_scale: 1.0,
        variant,
        lambda_g,
        ..ModelConfig::default()
    }
}

/// Random batch of `b` distinct tasks with `n` transitions and a
/// `rows`-step grounding trajectory each.
pub fn random_batch(cfg: &ModelConfig, b: usize, n: usize, rows: usize, seed: u64) -> TrainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |len: usize, scale: f64| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-scale..scale)).collect() };
    let width = 2 * cfg.state_dim + cfg.action_dim + 1;
    let entries = (0..b)
        .map(|i| BatchEntry {
            task_id: i as u32,
            text: v(cfg.d_z, 1.0),
            text_positive: None,
            states: v(n * cfg.state_dim, 1.0),
            actions: v(n * cfg.action_dim, 0.9),
            trajectory: v(rows * width, 1.0),
        })
        .collect();
    TrainBatch { entries }
}

/// Max relative error between the tape gradient of `term` and central
/// differences of the same term through the whole model.
pub fn term_gradient_error(model: &TenetModel, batch: &TrainBatch, term: LossTerm) -> f64 {
    let (_, analytic) = model.term_grad(batch, term).unwrap();
    let x = model.flat_params();
    let mut probe = model.clone();
    let numeric = central_diff(&x, FD_EPS, |p| {
        probe.set_flat_params(p).unwrap();
        term.of(&probe.total_loss(batch).unwrap())
    });
    max_rel_err(&analytic, &numeric)
}
