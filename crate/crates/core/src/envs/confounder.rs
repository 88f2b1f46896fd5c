//! Environment whose human reward depends on an episode-level hidden factor
//! that never appears in the emitted states.
//!
//! With `x(s, a) = [φ(s), onehot(a)]`, the environmental reward is
//! `r = c_env + w_env·x` and a separate human component is `g = c_h + w_h·x`;
//! at `correlation_knob = 0` the two weight vectors have disjoint supports.
//! The per-step human reward mean is
//! `m = |k|·r̃ + (1-|k|)·g·(1 + λ·(u·h)/‖u‖₁)` with `r̃ = r` for `k ≥ 0` and
//! `r_max - r` otherwise, and `h ∈ {±1}^k` drawn once per episode. Zero-mean
//! noise truncated symmetrically to `[-min(3σ, m), min(3σ, m)]` keeps every
//! IHR non-negative without moving its mean.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::oracle::FiniteModel;
use super::tabular::{check_stochastic, dirichlet};
use crate::error::{Error, Result};
use crate::hmdp::{discounted_return, Action, ActionSpace, HmdpSpec, StateSpace, Trajectory};
use crate::policy::{sample_categorical, Policy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentConfounderEnv {
    pub num_states: usize,
    pub num_actions: usize,
    /// `φ(s)`, one row per observed state.
    pub features: Vec<Vec<f64>>,
    /// Emit `φ(s)` instead of the state index.
    pub emit_features: bool,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub initial_dist: Vec<f64>,
    pub env_weights: Vec<f64>,
    pub env_bias: f64,
    pub human_weights: Vec<f64>,
    pub human_bias: f64,
    pub hidden_factor_dim: usize,
    pub hidden_loading: Vec<f64>,
    pub hidden_strength: f64,
    pub correlation_knob: f64,
    pub max_env_reward: f64,
    pub noise_std: f64,
    pub discount: f64,
    pub horizon: usize,
    pub env_id: String,
}

/// Generator settings for [`LatentConfounderEnv::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfounderConfig {
    pub num_states: usize,
    pub num_actions: usize,
    pub feature_dim: usize,
    pub hidden_factor_dim: usize,
    pub correlation_knob: f64,
    pub noise_std: f64,
    /// Probability mass each transition row keeps on the current state.
    pub stickiness: f64,
    pub hidden_strength: f64,
    /// Spread of the human component `g` over state-action pairs.
    pub human_scale: f64,
    pub emit_features: bool,
    pub discount: f64,
    pub horizon: usize,
}

impl Default for ConfounderConfig {
    fn default() -> Self {
        Self {
            num_states: 8,
            num_actions: 3,
            feature_dim: 6,
            hidden_factor_dim: 3,
            correlation_knob: 0.0,
            noise_std: 0.2,
            stickiness: 0.6,
            hidden_strength: 0.5,
            human_scale: 2.0,
            emit_features: false,
            discount: 0.9,
            horizon: 10,
        }
    }
}

impl LatentConfounderEnv {
    fn x(&self, s: usize, a: usize) -> Vec<f64> {
        let mut x = self.features[s].clone();
        x.extend((0..self.num_actions).map(|j| if j == a { 1.0 } else { 0.0 }));
        x
    }

    fn dot(w: &[f64], x: &[f64]) -> f64 {
        w.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn env_reward(&self, s: usize, a: usize) -> f64 {
        self.env_bias + Self::dot(&self.env_weights, &self.x(s, a))
    }

    pub fn human_component(&self, s: usize, a: usize) -> f64 {
        self.human_bias + Self::dot(&self.human_weights, &self.x(s, a))
    }

    /// IHR mean with the hidden term averaged out.
    pub fn base_mean(&self, s: usize, a: usize) -> f64 {
        let k = self.correlation_knob;
        let r = self.env_reward(s, a);
        let rt = if k >= 0.0 { r } else { self.max_env_reward - r };
        k.abs() * rt + (1.0 - k.abs()) * self.human_component(s, a)
    }

    fn hidden_term(&self, h: &[f64]) -> f64 {
        let norm: f64 = self.hidden_loading.iter().map(|u| u.abs()).sum();
        if norm == 0.0 {
            return 0.0;
        }
        self.hidden_strength * Self::dot(&self.hidden_loading, h) / norm
    }

    pub fn emitted_state(&self, s: usize) -> Vec<f64> {
        if self.emit_features {
            self.features[s].clone()
        } else {
            vec![s as f64]
        }
    }

    /// Emitted state of every observed state index.
    pub fn state_reprs(&self) -> Vec<Vec<f64>> {
        (0..self.num_states).map(|s| self.emitted_state(s)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.num_states, self.num_actions);
        if ns == 0 || na == 0 || self.features.len() != ns {
            return Err(Error::InvalidSpec("state/action/feature counts".into()));
        }
        let d = self.features[0].len();
        if self.features.iter().any(|f| f.len() != d)
            || self.env_weights.len() != d + na
            || self.human_weights.len() != d + na
        {
            return Err(Error::InvalidSpec("weight or feature width".into()));
        }
        if self.hidden_factor_dim == 0 || self.hidden_loading.len() != self.hidden_factor_dim {
            return Err(Error::InvalidSpec("hidden factor dimension".into()));
        }
        if !(-1.0..=1.0).contains(&self.correlation_knob) {
            return Err(Error::InvalidSpec("correlation_knob outside [-1, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.hidden_strength) || !(self.noise_std >= 0.0) {
            return Err(Error::InvalidSpec("hidden strength or noise".into()));
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
        check_stochastic(&self.initial_dist, "initial distribution")?;
        for s in 0..ns {
            for a in 0..na {
                if self.env_reward(s, a) < 0.0
                    || self.human_component(s, a) < 0.0
                    || self.env_reward(s, a) > self.max_env_reward
                {
                    return Err(Error::InvalidSpec("reward components must be in range".into()));
                }
            }
        }
        self.spec().validate()
    }

    pub fn spec(&self) -> HmdpSpec {
        HmdpSpec {
            state_space: if self.emit_features {
                StateSpace::Features {
                    state_dim: self.features[0].len(),
                }
            } else {
                StateSpace::Tabular {
                    num_states: self.num_states,
                }
            },
            action_space: ActionSpace::Discrete {
                num_actions: self.num_actions,
            },
            discount: self.discount,
            horizon: self.horizon,
            env_id: self.env_id.clone(),
        }
    }

    /// Finite model over observed states carrying the averaged IHR mean.
    pub fn model(&self) -> FiniteModel {
        FiniteModel {
            num_states: self.num_states,
            num_actions: self.num_actions,
            transition: self.transition.clone(),
            initial_dist: self.initial_dist.clone(),
            reward_mean: (0..self.num_states)
                .map(|s| (0..self.num_actions).map(|a| self.base_mean(s, a)).collect())
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
        let h: Vec<f64> = (0..self.hidden_factor_dim)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let scale = 1.0 + self.hidden_term(&h);
        let k = self.correlation_knob;
        let mut states = Vec::with_capacity(self.horizon + 1);
        let mut actions = Vec::with_capacity(self.horizon);
        let mut env_rewards = Vec::with_capacity(self.horizon);
        let mut probs = Vec::with_capacity(self.horizon);
        let mut ihrs = Vec::with_capacity(self.horizon);
        let mut s = sample_categorical(&self.initial_dist, rng).0;
        for _ in 0..self.horizon {
            let state = self.emitted_state(s);
            let (a, p) = policy.sample(&state, rng)?;
            let r = self.env_reward(s, a);
            let rt = if k >= 0.0 { r } else { self.max_env_reward - r };
            let mean = k.abs() * rt + (1.0 - k.abs()) * self.human_component(s, a) * scale;
            let half = (3.0 * self.noise_std).min(mean);
            let noise = if half > 0.0 {
                let d = Normal::new(0.0, self.noise_std).expect("positive std");
                loop {
                    let e: f64 = d.sample(rng);
                    if e.abs() <= half {
                        break e;
                    }
                }
            } else {
                0.0
            };
            ihrs.push((mean + noise).max(0.0));
            env_rewards.push(r);
            probs.push(p);
            actions.push(Action::Discrete(a));
            states.push(state);
            s = sample_categorical(&self.transition[s][a], rng).0;
        }
        states.push(self.emitted_state(s));
        Ok(Trajectory {
            states,
            actions,
            env_rewards,
            human_return: discounted_return(&ihrs, self.discount)?,
            behavior_probs: Some(probs),
            true_ihrs: Some(ihrs),
        })
    }

    /// Random instance. Environmental weights live on the even coordinates of
    /// `x`, human weights on the odd ones, so the two are unrelated by design.
    pub fn generate<R: Rng + ?Sized>(cfg: &ConfounderConfig, env_id: &str, rng: &mut R) -> Result<Self> {
        let (ns, na, d) = (cfg.num_states, cfg.num_actions, cfg.feature_dim);
        if ns == 0 || na == 0 || d == 0 || cfg.hidden_factor_dim == 0 {
            return Err(Error::InvalidSpec("confounder sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&cfg.stickiness) {
            return Err(Error::InvalidSpec("stickiness outside [0, 1)".into()));
        }
        let gauss = |rng: &mut R| -> f64 { rng.sample(StandardNormal) };
        let features: Vec<Vec<f64>> = (0..ns).map(|_| (0..d).map(|_| gauss(rng)).collect()).collect();
        let width = d + na;
        let env_weights: Vec<f64> = (0..width)
            .map(|i| if i % 2 == 0 { gauss(rng) } else { 0.0 })
            .collect();
        let human_weights: Vec<f64> = (0..width)
            .map(|i| if i % 2 == 1 { gauss(rng) } else { 0.0 })
            .collect();
        let transition: Vec<Vec<Vec<f64>>> = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|_| {
                        let mut row = dirichlet(ns, 0.3, rng);
                        for p in row.iter_mut() {
                            *p *= 1.0 - cfg.stickiness;
                        }
                        row[s] += cfg.stickiness;
                        let err = 1.0 - row.iter().sum::<f64>();
                        row[s] += err;
                        row
                    })
                    .collect()
            })
            .collect();
        let hidden_loading: Vec<f64> = (0..cfg.hidden_factor_dim).map(|_| gauss(rng)).collect();

        let mut env = Self {
            num_states: ns,
            num_actions: na,
            features,
            emit_features: cfg.emit_features,
            transition,
            initial_dist: vec![1.0 / ns as f64; ns],
            env_weights,
            env_bias: 0.0,
            human_weights,
            human_bias: 0.0,
            hidden_factor_dim: cfg.hidden_factor_dim,
            hidden_loading,
            hidden_strength: cfg.hidden_strength,
            correlation_knob: cfg.correlation_knob,
            max_env_reward: 0.0,
            noise_std: cfg.noise_std,
            discount: cfg.discount,
            horizon: cfg.horizon,
            env_id: env_id.to_string(),
        };
        // rescale both components to [0.1, 1.1] (env) and [0.1, 0.1 + human_scale] (human)
        let pairs: Vec<(usize, usize)> = (0..ns).flat_map(|s| (0..na).map(move |a| (s, a))).collect();
        let range = |f: &dyn Fn(usize, usize) -> f64| {
            let v: Vec<f64> = pairs.iter().map(|&(s, a)| f(s, a)).collect();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, (hi - lo).max(1e-12))
        };
        let (lo, span) = range(&|s, a| env.env_reward(s, a));
        env.env_weights.iter_mut().for_each(|w| *w /= span);
        env.env_bias = 0.1 - lo / span;
        let (lo, span) = range(&|s, a| env.human_component(s, a));
        let k = cfg.human_scale / span;
        env.human_weights.iter_mut().for_each(|w| *w *= k);
        env.human_bias = 0.1 - lo * k;
        env.max_env_reward = 1.2;
        env.validate()?;
        Ok(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env(knob: f64) -> LatentConfounderEnv {
        let cfg = ConfounderConfig {
            correlation_knob: knob,
            ..Default::default()
        };
        LatentConfounderEnv::generate(&cfg, "c", &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn supports_are_disjoint() {
        let e = env(0.0);
        for (a, b) in e.env_weights.iter().zip(&e.human_weights) {
            assert!(*a == 0.0 || *b == 0.0);
        }
    }

    #[test]
    fn full_correlation_tracks_env_reward() {
        let e = env(1.0);
        let pol = Policy::UniformRandom { num_actions: e.num_actions };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let t = e.sample_episode(&pol, &mut rng).unwrap();
            for (r, h) in t.env_rewards.iter().zip(t.true_ihrs.as_ref().unwrap()) {
                assert!((r - h).abs() <= 3.0 * e.noise_std + 1e-12);
                assert!(*h >= 0.0);
            }
        }
    }

    #[test]
    fn hidden_factor_is_not_emitted() {
        let mut e = env(0.0);
        e.emit_features = true;
        let pol = Policy::FeaturizedSoftmax {
            weights: vec![vec![0.0; e.features[0].len() + 1]; e.num_actions],
            temperature: 1.0,
        };
        let t = e.sample_episode(&pol, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for s in &t.states {
            assert!(e.features.contains(s));
        }
    }
}
