//! Optimizer behavior over whole runs: convergence on a convex problem and
//! bitwise run-to-run reproducibility.

use promptface_tensor::tape::{ParamVars, Tape};
use promptface_tensor::{adam_step, init, AdamConfig, NamedParamSet, OptimizerState, Tensor};
use std::collections::BTreeMap;

/// One optimization step of mean((w - target)^2).
fn step(
    params: &mut NamedParamSet<f32>,
    target: &Tensor<f32>,
    state: &mut OptimizerState<f32>,
    cfg: &AdamConfig,
) -> f32 {
    let mut tape = Tape::<f32>::new();
    let vars: ParamVars = tape.bind(params, true);
    let t = tape.constant(target.clone());
    let diff = tape.sub(vars["w"], t).unwrap();
    let sq = tape.mul(diff, diff).unwrap();
    let loss = tape.mean_all(sq);
    let loss_val = tape.scalar_value(loss).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let mut gmap = BTreeMap::new();
    gmap.insert("w".to_string(), grads.take(vars["w"]).unwrap());
    adam_step(params, &gmap, state, cfg).unwrap();
    loss_val
}

fn run(seed: u64, steps: usize) -> NamedParamSet<f32> {
    let mut rng = init::rng(seed);
    let mut params = NamedParamSet::new();
    params
        .insert("w", init::randn(&mut rng, &[8], 1.0), true)
        .unwrap();
    let target: Tensor<f32> = init::randn(&mut rng, &[8], 1.0);
    let mut state = OptimizerState::new();
    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    for _ in 0..steps {
        step(&mut params, &target, &mut state, &cfg);
    }
    params
}

#[test]
fn quadratic_converges() {
    let mut rng = init::rng(5);
    let mut params = NamedParamSet::new();
    params
        .insert("w", init::randn(&mut rng, &[8], 1.0), true)
        .unwrap();
    let target: Tensor<f32> = init::randn(&mut rng, &[8], 1.0);
    let mut state = OptimizerState::new();
    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let first = step(&mut params, &target, &mut state, &cfg);
    let mut last = first;
    for _ in 0..399 {
        last = step(&mut params, &target, &mut state, &cfg);
    }
    assert!(
        last < first * 1e-3,
        "loss barely moved: {first} -> {last}"
    );
    assert!(last < 1e-4, "did not converge: {last}");
}

#[test]
fn identical_seeds_produce_bitwise_identical_parameters() {
    let a = run(42, 100);
    let b = run(42, 100);
    let (ta, tb) = (a.tensor("w").unwrap(), b.tensor("w").unwrap());
    assert_eq!(ta.data(), tb.data());
}

#[test]
fn different_seeds_diverge() {
    let a = run(42, 100);
    let b = run(43, 100);
    assert_ne!(a.tensor("w").unwrap().data(), b.tensor("w").unwrap().data());
}
