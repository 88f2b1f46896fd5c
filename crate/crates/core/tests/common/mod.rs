//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use opehf::envs::{Env, TabularHmdp};
use opehf::policy::Policy;
use opehf_diff::{Bound, Graph, ParameterSet, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tabular env with noisy, truncated-at-zero IHRs.
pub fn tabular(seed: u64, ns: usize, na: usize, horizon: usize, discount: f64) -> Env {
    Env::Tabular(TabularHmdp::random(ns, na, horizon, discount, 2.0, 0.3, "fixture", &mut rng(seed)).unwrap())
}

/// Softmax policy with logits uniform in `[-scale, scale]`.
pub fn random_policy(seed: u64, ns: usize, na: usize, scale: f64) -> Policy {
    let mut r = rng(seed);
    Policy::TabularSoftmax {
        logits: (0..ns)
            .map(|_| (0..na).map(|_| r.random_range(-scale..scale)).collect())
            .collect(),
        temperature: 1.0,
    }
}

/// Largest per-entry relative error between tape gradients and central
/// finite differences of the scalar `f`.
pub fn max_rel_error<F>(ps: &mut ParameterSet, f: F) -> f64
where
    F: Fn(&mut Graph, &Bound) -> Var,
{
    let mut g = Graph::new();
    let b = ps.bind(&mut g);
    let root = f(&mut g, &b);
    g.backward(root).unwrap();
    let analytic = b.grads(&g);
    let eval = |ps: &ParameterSet| {
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let root = f(&mut g, &b);
        g.scalar_value(root)
    };
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let (r, c) = ps.value(id).dim();
        for i in 0..r {
            for j in 0..c {
                let orig = ps.value(id)[[i, j]];
                ps.value_mut(id)[[i, j]] = orig + eps;
                let up = eval(ps);
                ps.value_mut(id)[[i, j]] = orig - eps;
                let down = eval(ps);
                ps.value_mut(id)[[i, j]] = orig;
                let num = (up - down) / (2.0 * eps);
                let ana = analytic.get(id)[[i, j]];
                worst = worst.max((num - ana).abs() / (num.abs() + ana.abs()).max(1e-6));
            }
        }
    }
    worst
}
