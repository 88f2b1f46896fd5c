//! The latent model used on its own as a return predictor: roll the
//! decoder forward under the target policy and read the terminal head.

use ndarray::Array2;
use opehf_diff::{gauss_sample_reparam, Graph, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::VlmhModel;
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::seed::stage_rng;

/// Mean of human returns sampled from the terminal head at the end of
/// `num_rollouts` latent rollouts. Initial
/// states are drawn from the training data's initial states, `z_0` from the
/// encoder, later latents from the decoder transition; actions come from
/// `policy` evaluated on decoded states.
pub fn predict_human_return(model: &VlmhModel, policy: &Policy, num_rollouts: usize, seed: u64) -> Result<f64> {
    if !model.trained {
        return Err(Error::Untrained);
    }
    if num_rollouts == 0 || model.initial_states.is_empty() {
        return Err(Error::InvalidArgument("need rollouts and initial states".into()));
    }
    if policy.num_actions() != model.arch.num_actions {
        return Err(Error::DimensionMismatch("policy action count".into()));
    }
    let mut rng = stage_rng(seed, "vlmh-rollout", 0);
    let b = num_rollouts;
    let l = model.arch.latent_dim;
    let na = model.arch.num_actions;
    let mut noise = || Array2::from_shape_fn((b, l), |_| StandardNormal.sample(&mut rng));
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);

    let mut pick = stage_rng(seed, "vlmh-rollout-init", 0);
    let mut states: Vec<Vec<f64>> = (0..b)
        .map(|_| model.initial_states[pick.random_range(0..model.initial_states.len())].clone())
        .collect();
    let mut x0 = Array2::zeros((b, model.arch.state_dim));
    for (i, s) in states.iter().enumerate() {
        for (j, v) in model.encode_state(s)?.into_iter().enumerate() {
            x0[[i, j]] = v;
        }
    }
    let x0 = g.leaf(x0);
    let q0 = model.arch.enc_init.forward(&mut g, &p, x0);
    let mut z: Var = gauss_sample_reparam(&mut g, q0, noise())?;
    let mut cell = model.arch.dec_cell.zero_state(&mut g, b);
    let mut act_rng = stage_rng(seed, "vlmh-rollout-actions", 0);
    let mut ret_rng = stage_rng(seed, "vlmh-rollout-return", 0);
    for _ in 0..model.arch.horizon {
        let mut a = Array2::zeros((b, na));
        for (i, s) in states.iter().enumerate() {
            let (idx, _) = policy.sample(s, &mut act_rng)?;
            a[[i, idx]] = 1.0;
        }
        let a = g.leaf(a);
        let (prior, st) = model.prior_step(&mut g, &p, z, a, cell);
        cell = st;
        z = gauss_sample_reparam(&mut g, prior, noise())?;
        let ps = model.arch.dec_state.forward(&mut g, &p, z);
        let decoded = g.value(ps.mean).clone();
        states = decoded.rows().into_iter().map(|r| model.decode_state(&r.to_vec())).collect();
    }
    let head = model.arch.dec_return.forward(&mut g, &p, z);
    let draw = Array2::from_shape_fn((b, 1), |_| StandardNormal.sample(&mut ret_rng));
    let sample = gauss_sample_reparam(&mut g, head, draw)?;
    let total: f64 = g.value(sample).iter().map(|v| model.scalers.ret.invert(0, *v)).sum();
    let v = total / b as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite("ablation prediction".into()));
    }
    Ok(v)
}
