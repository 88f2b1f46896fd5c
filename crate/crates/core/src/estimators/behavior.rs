//! Fitting `β̂(a|s)` from logged data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmdp::{state_index, OfflineDataset};
use crate::policy::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BehaviorKind {
    TabularCounts,
    FeaturizedSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicyEstimate {
    pub kind: BehaviorKind,
    /// Laplace pseudo-count (tabular) or ridge strength (featurized).
    pub smoothing: f64,
    /// Fitted policy; every probability is strictly positive.
    pub policy: Policy,
    /// Mean per-step log-likelihood on a 10% held-out split of trajectories.
    pub heldout_log_likelihood: Option<f64>,
    pub audit: Vec<String>,
}

impl BehaviorPolicyEstimate {
    pub fn prob(&self, state: &[f64], action: usize) -> Result<f64> {
        self.policy
            .action_prob(state, &crate::hmdp::Action::Discrete(action))
    }
}

struct Sample<'a> {
    state: &'a [f64],
    action: usize,
}

fn samples<'a>(ds: &'a OfflineDataset, idx: &[usize]) -> Result<Vec<Sample<'a>>> {
    let mut out = Vec::new();
    for &i in idx {
        let t = &ds.trajectories[i];
        for (s, a) in t.states.iter().zip(&t.actions) {
            out.push(Sample {
                state: s,
                action: a.index()?,
            });
        }
    }
    Ok(out)
}

fn fit_counts(
    data: &[Sample],
    num_states: usize,
    num_actions: usize,
    alpha: f64,
    audit: &mut Vec<String>,
) -> Result<Policy> {
    let mut counts = vec![vec![0.0; num_actions]; num_states];
    for s in data {
        counts[state_index(s.state)?][s.action] += 1.0;
    }
    let mut table = Vec::with_capacity(num_states);
    for (s, row) in counts.iter().enumerate() {
        let n: f64 = row.iter().sum();
        if n == 0.0 {
            audit.push(format!("state {s} never visited: uniform fallback"));
            table.push(vec![1.0 / num_actions as f64; num_actions]);
        } else {
            let denom = n + alpha * num_actions as f64;
            table.push(row.iter().map(|c| (c + alpha) / denom).collect());
        }
    }
    Policy::from_prob_table(&table)
}

fn design(state: &[f64]) -> Vec<f64> {
    let mut x = state.to_vec();
    x.push(1.0);
    x
}

fn softmax_probs(w: &DVector<f64>, x: &[f64], na: usize) -> Vec<f64> {
    let p = x.len();
    let logits: Vec<f64> = (0..na)
        .map(|a| (0..p).map(|j| w[a * p + j] * x[j]).sum())
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn objective(w: &DVector<f64>, data: &[(Vec<f64>, usize)], na: usize, ridge: f64) -> f64 {
    let nll: f64 = data
        .iter()
        .map(|(x, a)| -softmax_probs(w, x, na)[*a].ln())
        .sum();
    nll + 0.5 * ridge * w.norm_squared()
}

/// Multinomial logistic regression by damped Newton steps.
fn fit_logistic(data: &[Sample], num_actions: usize, ridge: f64) -> Result<Policy> {
    let rows: Vec<(Vec<f64>, usize)> = data.iter().map(|s| (design(s.state), s.action)).collect();
    let p = rows[0].0.len();
    let na = num_actions;
    let dim = na * p;
    let mut w = DVector::<f64>::zeros(dim);
    let mut obj = objective(&w, &rows, na, ridge);
    for _ in 0..100 {
        let mut grad = &w * ridge;
        let mut hess = DMatrix::<f64>::identity(dim, dim) * ridge;
        for (x, a) in &rows {
            let pr = softmax_probs(&w, x, na);
            for k in 0..na {
                let r = pr[k] - if k == *a { 1.0 } else { 0.0 };
                for j in 0..p {
                    grad[k * p + j] += r * x[j];
                }
                for l in 0..na {
                    let c = pr[k] * (if k == l { 1.0 } else { 0.0 } - pr[l]);
                    if c == 0.0 {
                        continue;
                    }
                    for i in 0..p {
                        let cx = c * x[i];
                        for j in 0..p {
                            hess[(k * p + i, l * p + j)] += cx * x[j];
                        }
                    }
                }
            }
        }
        let chol = hess
            .cholesky()
            .ok_or_else(|| Error::NonFinite("logistic regression Hessian".into()))?;
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut improved = false;
        while t > 1e-8 {
            let cand = &w - &step * t;
            let c = objective(&cand, &rows, na, ridge);
            if c <= obj {
                let gain = obj - c;
                w = cand;
                obj = c;
                improved = gain > 1e-12 * (1.0 + obj.abs());
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logistic regression weights".into()));
    }
    Ok(Policy::FeaturizedSoftmax {
        weights: (0..na)
            .map(|a| (0..p).map(|j| w[a * p + j]).collect())
            .collect(),
        temperature: 1.0,
    })
}

fn mean_log_likelihood(policy: &Policy, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut ll = 0.0;
    for s in data {
        ll += policy.action_probs(s.state)?[s.action].ln();
    }
    Ok(ll / data.len() as f64)
}

/// Laplace-smoothed counts (α = `alpha`) for tabular datasets, ridge-penalized
/// multinomial logistic regression otherwise. The held-out score comes from
/// a fit on the first 90% of trajectories; the returned policy uses all data.
pub fn estimate_behavior_policy(ds: &OfflineDataset, alpha: f64) -> Result<BehaviorPolicyEstimate> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let na = ds.spec.num_actions()?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let n_train = ((ds.len() as f64) * 0.9).ceil() as usize;
    let (train, held) = all.split_at(n_train.min(ds.len()));
    let mut audit = Vec::new();
    let ridge = 1e-3;
    let (kind, smoothing) = match ds.spec.num_states() {
        Some(_) => (BehaviorKind::TabularCounts, alpha),
        None => (BehaviorKind::FeaturizedSoftmax, ridge),
    };
    let fit = |idx: &[usize], audit: &mut Vec<String>| -> Result<Policy> {
        let data = samples(ds, idx)?;
        match ds.spec.num_states() {
            Some(ns) => fit_counts(&data, ns, na, alpha, audit),
            None => fit_logistic(&data, na, ridge),
        }
    };
    let heldout_log_likelihood = if held.is_empty() {
        None
    } else {
        let partial = fit(train, &mut Vec::new())?;
        Some(mean_log_likelihood(&partial, &samples(ds, held)?)?)
    };
    let policy = fit(&all, &mut audit)?;
    Ok(BehaviorPolicyEstimate {
        kind,
        smoothing,
        policy,
        heldout_log_likelihood,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmdp::{Action, ActionSpace, HmdpSpec, StateSpace, Trajectory};

    fn ds_with(actions: Vec<(usize, usize)>, num_states: usize) -> OfflineDataset {
        let spec = HmdpSpec {
            state_space: StateSpace::Tabular { num_states },
            action_space: ActionSpace::Discrete { num_actions: 2 },
            discount: 0.9,
            horizon: 1,
            env_id: "b".into(),
        };
        let trajectories = actions
            .into_iter()
            .map(|(s, a)| Trajectory {
                states: vec![vec![s as f64], vec![s as f64]],
                actions: vec![Action::Discrete(a)],
                env_rewards: vec![0.0],
                human_return: 0.0,
                behavior_probs: None,
                true_ihrs: None,
            })
            .collect();
        OfflineDataset::new(spec, trajectories, "t", 0).unwrap()
    }

    #[test]
    fn laplace_counts() {
        let est = estimate_behavior_policy(&ds_with(vec![(0, 0); 100], 2), 1.0).unwrap();
        assert!((est.prob(&[0.0], 0).unwrap() - 101.0 / 102.0).abs() < 1e-12);
        assert_eq!(est.prob(&[1.0], 0).unwrap(), 0.5);
        assert_eq!(est.prob(&[1.0], 1).unwrap(), 0.5);
        assert!(est.audit.iter().any(|m| m.contains("state 1")));
        assert!(est.heldout_log_likelihood.is_some());
    }

    #[test]
    fn logistic_recovers_linear_policy() {
        use rand::{Rng, SeedableRng};
        let truth = Policy::FeaturizedSoftmax {
            weights: vec![vec![1.5, -0.5, 0.2], vec![-1.0, 1.0, 0.0], vec![0.0, 0.0, -0.3]],
            temperature: 1.0,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let spec = HmdpSpec {
            state_space: StateSpace::Features { state_dim: 2 },
            action_space: ActionSpace::Discrete { num_actions: 3 },
            discount: 0.9,
            horizon: 1,
            env_id: "f".into(),
        };
        let trajectories = (0..6000)
            .map(|_| {
                let s = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                let (a, _) = truth.sample(&s, &mut rng).unwrap();
                Trajectory {
                    states: vec![s.clone(), s],
                    actions: vec![Action::Discrete(a)],
                    env_rewards: vec![0.0],
                    human_return: 0.0,
                    behavior_probs: None,
                    true_ihrs: None,
                }
            })
            .collect();
        let ds = OfflineDataset::new(spec, trajectories, "f", 0).unwrap();
        let est = estimate_behavior_policy(&ds, 1.0).unwrap();
        assert_eq!(est.kind, BehaviorKind::FeaturizedSoftmax);
        for s in [[0.0, 0.0], [1.0, -1.0], [-1.5, 0.5]] {
            let p = truth.action_probs(&s).unwrap();
            let q = est.policy.action_probs(&s).unwrap();
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 0.05, "{p:?} vs {q:?}");
            }
        }
        let ll = est.heldout_log_likelihood.unwrap();
        assert!(ll < 0.0 && ll > -(3.0f64).ln());
    }
}
