use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use super::oracle::FiniteModel;
use crate::error::{Error, Result};
use crate::hmdp::{discounted_return, Action, ActionSpace, HmdpSpec, StateSpace, Trajectory};
use crate::policy::{sample_categorical, Policy};

/// Finite HMDP whose immediate human reward is Gaussian truncated below at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularHmdp {
    pub num_states: usize,
    pub num_actions: usize,
    /// `transition[s][a][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
    pub env_reward: Vec<Vec<f64>>,
    pub ihr_mean: Vec<Vec<f64>>,
    pub ihr_std: Vec<Vec<f64>>,
    pub initial_dist: Vec<f64>,
    pub discount: f64,
    pub horizon: usize,
    pub env_id: String,
}

/// Mean of `N(mu, sigma²)` conditioned on being non-negative.
pub fn truncated_mean(mu: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return mu.max(0.0);
    }
    let n = StdNormal::standard();
    let alpha = -mu / sigma;
    let tail = 1.0 - n.cdf(alpha);
    mu + sigma * n.pdf(alpha) / tail
}

/// Draws from `N(mu, sigma²)` truncated below at 0 by rejection; `mu ≥ 0`
/// keeps the acceptance rate at least one half.
pub fn sample_truncated<R: Rng + ?Sized>(mu: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return mu.max(0.0);
    }
    let d = Normal::new(mu, sigma).expect("finite positive std");
    loop {
        let x = d.sample(rng);
        if x >= 0.0 {
            return x;
        }
    }
}

pub(crate) fn check_stochastic(rows: &[f64], what: &str) -> Result<()> {
    if rows.iter().any(|p| !(*p >= 0.0)) || (rows.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSpec(format!("{what} is not a probability vector")));
    }
    Ok(())
}

/// Random probability vector with symmetric Dirichlet(alpha) law.
pub(crate) fn dirichlet<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let x: Vec<f64> = (0..n).map(|_| g.sample(rng)).collect();
        let s: f64 = x.iter().sum();
        if s > 0.0 {
            let mut p: Vec<f64> = x.iter().map(|v| v / s).collect();
            // fold rounding error into the largest entry so the row sums to 1
            let err = 1.0 - p.iter().sum::<f64>();
            let k = (0..n).fold(0, |b, i| if p[i] > p[b] { i } else { b });
            p[k] += err;
            return p;
        }
    }
}

impl TabularHmdp {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.num_states, self.num_actions);
        if ns == 0 || na == 0 {
            return Err(Error::InvalidSpec("empty state or action set".into()));
        }
        let shape_ok = |t: &Vec<Vec<f64>>| t.len() == ns && t.iter().all(|r| r.len() == na);
        if !shape_ok(&self.env_reward) || !shape_ok(&self.ihr_mean) || !shape_ok(&self.ihr_std) {
            return Err(Error::InvalidSpec("reward tables must be S x A".into()));
        }
        if self.transition.len() != ns
            || self
                .transition
                .iter()
                .any(|r| r.len() != na || r.iter().any(|p| p.len() != ns))
        {
            return Err(Error::InvalidSpec("transition must be S x A x S".into()));
        }
        for row in self.transition.iter().flatten() {
            check_stochastic(row, "transition row")?;
        }
        if self.initial_dist.len() != ns {
            return Err(Error::InvalidSpec("initial distribution length".into()));
        }
        check_stochastic(&self.initial_dist, "initial distribution")?;
        if self.ihr_mean.iter().flatten().any(|m| !(*m >= 0.0)) {
            return Err(Error::InvalidSpec("IHR means must be non-negative".into()));
        }
        if self.ihr_std.iter().flatten().any(|m| !(*m >= 0.0)) {
            return Err(Error::InvalidSpec("IHR std must be non-negative".into()));
        }
        self.spec().validate()
    }

    pub fn spec(&self) -> HmdpSpec {
        HmdpSpec {
            state_space: StateSpace::Tabular {
                num_states: self.num_states,
            },
            action_space: ActionSpace::Discrete {
                num_actions: self.num_actions,
            },
            discount: self.discount,
            horizon: self.horizon,
            env_id: self.env_id.clone(),
        }
    }

    /// Finite model carrying the truncated-Gaussian mean of each IHR.
    pub fn model(&self) -> FiniteModel {
        FiniteModel {
            num_states: self.num_states,
            num_actions: self.num_actions,
            transition: self.transition.clone(),
            initial_dist: self.initial_dist.clone(),
            reward_mean: self
                .ihr_mean
                .iter()
                .zip(&self.ihr_std)
                .map(|(m, s)| m.iter().zip(s).map(|(m, s)| truncated_mean(*m, *s)).collect())
                .collect(),
            discount: self.discount,
            horizon: self.horizon,
        }
    }

    pub fn sample_episode<R: Rng + ?Sized>(&self, policy: &Policy, rng: &mut R) -> Result<Trajectory> {
        if policy.num_actions() != self.num_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy has {} actions, env has {}",
                policy.num_actions(),
                self.num_actions
            )));
        }
        let t_max = self.horizon;
        let mut states = Vec::with_capacity(t_max + 1);
        let mut actions = Vec::with_capacity(t_max);
        let mut env_rewards = Vec::with_capacity(t_max);
        let mut probs = Vec::with_capacity(t_max);
        let mut ihrs = Vec::with_capacity(t_max);
        let mut s = sample_categorical(&self.initial_dist, rng).0;
        for _ in 0..t_max {
            let state = vec![s as f64];
            let (a, p) = policy.sample(&state, rng)?;
            env_rewards.push(self.env_reward[s][a]);
            ihrs.push(sample_truncated(self.ihr_mean[s][a], self.ihr_std[s][a], rng));
            probs.push(p);
            actions.push(Action::Discrete(a));
            states.push(state);
            s = sample_categorical(&self.transition[s][a], rng).0;
        }
        states.push(vec![s as f64]);
        Ok(Trajectory {
            states,
            actions,
            env_rewards,
            human_return: discounted_return(&ihrs, self.discount)?,
            behavior_probs: Some(probs),
            true_ihrs: Some(ihrs),
        })
    }

    /// Random instance: Dirichlet(0.5) transitions, uniform start, IHR means
    /// `scale·U²` so that a few state-action pairs dominate.
    pub fn random<R: Rng + ?Sized>(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        discount: f64,
        ihr_scale: f64,
        ihr_noise: f64,
        env_id: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let transition = (0..num_states)
            .map(|_| {
                (0..num_actions)
                    .map(|_| dirichlet(num_states, 0.5, rng))
                    .collect()
            })
            .collect();
        let table = |rng: &mut R, f: &dyn Fn(f64) -> f64| -> Vec<Vec<f64>> {
            (0..num_states)
                .map(|_| (0..num_actions).map(|_| f(rng.random::<f64>())).collect())
                .collect()
        };
        let ihr_mean = table(rng, &|u| ihr_scale * u * u);
        let env_reward = table(rng, &|u| u);
        let ihr_std = table(rng, &|u| ihr_noise * ihr_scale * (0.5 + u));
        let env = Self {
            num_states,
            num_actions,
            transition,
            env_reward,
            ihr_mean,
            ihr_std,
            initial_dist: vec![1.0 / num_states as f64; num_states],
            discount,
            horizon,
            env_id: env_id.to_string(),
        };
        env.validate()?;
        Ok(env)
    }

    /// Every IHR equals `value` exactly; dynamics are random.
    pub fn constant_ihr<R: Rng + ?Sized>(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        discount: f64,
        value: f64,
        env_id: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let mut env = Self::random(num_states, num_actions, horizon, discount, 1.0, 0.0, env_id, rng)?;
        env.ihr_mean = vec![vec![value; num_actions]; num_states];
        env.ihr_std = vec![vec![0.0; num_actions]; num_states];
        env.validate()?;
        Ok(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_mean_matches_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(mu, sigma) in &[(0.0, 1.0), (0.5, 2.0), (3.0, 0.5)] {
            let n = 200_000;
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let x = sample_truncated(mu, sigma, &mut rng);
                assert!(x >= 0.0);
                s += x;
                s2 += x * x;
            }
            let m = s / n as f64;
            let se = ((s2 / n as f64 - m * m) / n as f64).sqrt();
            assert!((m - truncated_mean(mu, sigma)).abs() < 4.0 * se);
        }
        // half-normal mean
        assert!((truncated_mean(0.0, 1.0) - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn random_env_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let env = TabularHmdp::random(4, 3, 5, 0.9, 2.0, 0.3, "r", &mut rng).unwrap();
        env.validate().unwrap();
    }
}
