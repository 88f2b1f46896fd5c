mod common;

use opehf::envs::generate_dataset;
use opehf::hmdp::Trajectory;
use opehf::policy::Policy;
use opehf::vlmh::{predict_human_return, train_vlmh, VlmhConfig, VlmhModel};
use opehf_diff::Graph;

fn small_config(epochs: usize) -> VlmhConfig {
    VlmhConfig {
        latent_dim: 3,
        hidden_size: 8,
        head_sizes: vec![16],
        learning_rate: 3e-3,
        epochs,
        batch_size: 32,
        ..Default::default()
    }
}

fn uniform() -> Policy {
    Policy::UniformRandom { num_actions: 2 }
}

#[test]
fn training_improves_the_elbo() {
    for seed in 0..3 {
        let env = common::tabular(seed, 2, 2, 4, 0.9);
        let ds = generate_dataset(&env, &uniform(), 200, seed, "elbo").unwrap();
        let mut m = VlmhModel::new(&ds, small_config(10), seed).unwrap();
        let log = train_vlmh(&mut m, &ds, seed).unwrap();
        assert!(!log.diverged);
        assert!(
            log.final_train_elbo > log.initial_train_elbo,
            "seed {seed}: {} -> {}",
            log.initial_train_elbo,
            log.final_train_elbo
        );
    }
}

#[test]
fn training_is_deterministic() {
    let env = common::tabular(4, 3, 2, 3, 0.9);
    let ds = generate_dataset(&env, &uniform(), 80, 4, "det").unwrap();
    let run = || {
        let mut m = VlmhModel::new(&ds, small_config(3), 11).unwrap();
        train_vlmh(&mut m, &ds, 11).unwrap();
        let enc = m.encode_dataset(&ds).unwrap();
        let pred = predict_human_return(&m, &uniform(), 50, 2).unwrap();
        (serde_json::to_string(&enc).unwrap(), pred.to_bits())
    };
    assert_eq!(run(), run());
}

#[test]
fn constant_states_are_learned() {
    // Every trajectory is identical, so the state log-likelihood can only rise.
    let env = common::tabular(9, 1, 2, 3, 0.9);
    let ds = generate_dataset(&env, &uniform(), 64, 9, "const").unwrap();
    let trajs: Vec<&Trajectory> = ds.trajectories.iter().collect();
    let mut m = VlmhModel::new(&ds, small_config(15), 5).unwrap();
    let noise = m.draw_noise(trajs.len(), &mut common::rng(1));
    let before = m.elbo_value(&trajs, &noise).unwrap();
    train_vlmh(&mut m, &ds, 5).unwrap();
    let after = m.elbo_value(&trajs, &noise).unwrap();
    assert!(after.log_states > before.log_states);
}

#[test]
fn untrained_model_refuses_to_predict() {
    let env = common::tabular(1, 2, 2, 3, 0.9);
    let ds = generate_dataset(&env, &uniform(), 10, 1, "u").unwrap();
    let m = VlmhModel::new(&ds, small_config(1), 0).unwrap();
    assert!(predict_human_return(&m, &uniform(), 10, 0).is_err());
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let env = common::tabular(seed, 2, 2, 3, 0.9);
        let ds = generate_dataset(&env, &uniform(), 3, seed, "grad").unwrap();
        let cfg = VlmhConfig {
            latent_dim: 2,
            hidden_size: 3,
            head_sizes: vec![4],
            ..Default::default()
        };
        let mut m = VlmhModel::new(&ds, cfg, seed).unwrap();
        let trajs: Vec<&Trajectory> = ds.trajectories.iter().collect();
        let batch = m.batch(&trajs).unwrap();
        let noise = m.draw_noise(trajs.len(), &mut common::rng(seed + 100));
        let model = m.clone();
        let err = common::max_rel_error(&mut m.params, |g: &mut Graph, p| {
            let e = model.elbo_terms(g, p, &batch, &noise).unwrap();
            g.mean(e.elbo)
        });
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}
