//! Specs, trajectories and offline datasets for MDPs whose human feedback
//! arrives once per episode as a discounted return.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observation space. Tabular states are stored as a one-element vector
/// holding the state index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateSpace {
    Tabular { num_states: usize },
    Features { state_dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActionSpace {
    Discrete {
        num_actions: usize,
    },
    Continuous {
        action_dim: usize,
        low: Vec<f64>,
        high: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmdpSpec {
    #[serde(flatten)]
    pub state_space: StateSpace,
    pub action_space: ActionSpace,
    pub discount: f64,
    pub horizon: usize,
    pub env_id: String,
}

impl HmdpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::InvalidSpec(format!(
                "discount {} outside [0, 1)",
                self.discount
            )));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidSpec("horizon must be at least 1".into()));
        }
        match self.state_space {
            StateSpace::Tabular { num_states: 0 } | StateSpace::Features { state_dim: 0 } => {
                return Err(Error::InvalidSpec("empty state space".into()))
            }
            _ => {}
        }
        match &self.action_space {
            ActionSpace::Discrete { num_actions: 0 } => {
                Err(Error::InvalidSpec("num_actions must be positive".into()))
            }
            ActionSpace::Discrete { .. } => Ok(()),
            ActionSpace::Continuous {
                action_dim,
                low,
                high,
            } => {
                if *action_dim == 0 || low.len() != *action_dim || high.len() != *action_dim {
                    return Err(Error::InvalidSpec("malformed continuous action box".into()));
                }
                if low.iter().zip(high).any(|(l, h)| !(l < h)) {
                    return Err(Error::InvalidSpec("action box low must be below high".into()));
                }
                Ok(())
            }
        }
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self.state_space, StateSpace::Tabular { .. })
    }

    /// Length of a stored state vector.
    pub fn state_len(&self) -> usize {
        match self.state_space {
            StateSpace::Tabular { .. } => 1,
            StateSpace::Features { state_dim } => state_dim,
        }
    }

    pub fn num_states(&self) -> Option<usize> {
        match self.state_space {
            StateSpace::Tabular { num_states } => Some(num_states),
            StateSpace::Features { .. } => None,
        }
    }

    pub fn num_actions(&self) -> Result<usize> {
        match self.action_space {
            ActionSpace::Discrete { num_actions } => Ok(num_actions),
            ActionSpace::Continuous { .. } => {
                Err(Error::Unsupported("continuous action space".into()))
            }
        }
    }

    /// `[γ^0, …, γ^{T-1}]`.
    pub fn discounts(&self) -> Vec<f64> {
        discount_powers(self.discount, self.horizon)
    }
}

pub fn discount_powers(discount: f64, horizon: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(horizon);
    let mut g = 1.0;
    for _ in 0..horizon {
        out.push(g);
        g *= discount;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn index(&self) -> Result<usize> {
        match self {
            Action::Discrete(a) => Ok(*a),
            Action::Continuous(_) => Err(Error::Unsupported("continuous action".into())),
        }
    }
}

/// Index of a tabular state stored as `[k]`.
pub fn state_index(state: &[f64]) -> Result<usize> {
    match state {
        [k] if *k >= 0.0 && k.fract() == 0.0 => Ok(*k as usize),
        _ => Err(Error::DimensionMismatch(format!(
            "expected a tabular state [k], got {state:?}"
        ))),
    }
}

/// `Σ_t discount^t · rewards[t]`.
pub fn discounted_return(rewards: &[f64], discount: f64) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::EmptySequence);
    }
    if !(0.0..1.0).contains(&discount) {
        return Err(Error::InvalidArgument(format!(
            "discount {discount} outside [0, 1)"
        )));
    }
    let mut total = 0.0;
    let mut g = 1.0;
    for r in rewards {
        total += g * r;
        g *= discount;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub env_rewards: Vec<f64>,
    pub human_return: f64,
    pub behavior_probs: Option<Vec<f64>>,
    /// Sampled immediate human rewards. Only simulators fill this in.
    #[serde(skip)]
    pub true_ihrs: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn validate(&self, spec: &HmdpSpec) -> Result<()> {
        let t = spec.horizon;
        let bad = |what: &str, got: usize, want: usize| {
            Err(Error::DimensionMismatch(format!(
                "{what} has length {got}, expected {want}"
            )))
        };
        if self.states.len() != t + 1 {
            return bad("states", self.states.len(), t + 1);
        }
        if self.actions.len() != t {
            return bad("actions", self.actions.len(), t);
        }
        if self.env_rewards.len() != t {
            return bad("env_rewards", self.env_rewards.len(), t);
        }
        let sl = spec.state_len();
        if let Some(s) = self.states.iter().find(|s| s.len() != sl) {
            return bad("state vector", s.len(), sl);
        }
        if let Some(n) = spec.num_states() {
            for s in &self.states {
                if state_index(s)? >= n {
                    return Err(Error::DimensionMismatch(format!("state {s:?} out of range")));
                }
            }
        }
        match &spec.action_space {
            ActionSpace::Discrete { num_actions } => {
                for a in &self.actions {
                    match a {
                        Action::Discrete(i) if i < num_actions => {}
                        _ => {
                            return Err(Error::DimensionMismatch(format!(
                                "action {a:?} invalid for {num_actions} discrete actions"
                            )))
                        }
                    }
                }
            }
            ActionSpace::Continuous { action_dim, .. } => {
                for a in &self.actions {
                    match a {
                        Action::Continuous(v) if v.len() == *action_dim => {}
                        _ => {
                            return Err(Error::DimensionMismatch(format!(
                                "action {a:?} invalid for a {action_dim}-d box"
                            )))
                        }
                    }
                }
            }
        }
        let finite = self.states.iter().flatten().all(|x| x.is_finite())
            && self.env_rewards.iter().all(|x| x.is_finite())
            && self.human_return.is_finite();
        if !finite {
            return Err(Error::NonFinite("trajectory".into()));
        }
        if let Some(p) = &self.behavior_probs {
            if p.len() != t {
                return bad("behavior_probs", p.len(), t);
            }
            if let Some(x) = p.iter().find(|x| !(**x > 0.0 && **x <= 1.0)) {
                return Err(Error::InvalidArgument(format!(
                    "behavior probability {x} outside (0, 1]"
                )));
            }
        }
        if let Some(ihrs) = &self.true_ihrs {
            if ihrs.len() != t {
                return bad("true_ihrs", ihrs.len(), t);
            }
            let g = discounted_return(ihrs, spec.discount)?;
            if (g - self.human_return).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "human_return {} differs from discounted IHR sum {g}",
                    self.human_return
                )));
            }
        }
        Ok(())
    }

    /// Discrete action indices.
    pub fn action_indices(&self) -> Result<Vec<usize>> {
        self.actions.iter().map(Action::index).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineDataset {
    pub spec: HmdpSpec,
    pub trajectories: Vec<Trajectory>,
    pub provenance: String,
    pub seed: u64,
}

impl OfflineDataset {
    pub fn new(
        spec: HmdpSpec,
        trajectories: Vec<Trajectory>,
        provenance: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        let ds = Self {
            spec,
            trajectories,
            provenance: provenance.into(),
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.trajectories.is_empty() {
            return Err(Error::InvalidArgument("dataset holds no trajectories".into()));
        }
        self.trajectories
            .iter()
            .try_for_each(|t| t.validate(&self.spec))
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn human_returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.human_return).collect()
    }

    pub fn env_returns(&self) -> Result<Vec<f64>> {
        self.trajectories
            .iter()
            .map(|t| discounted_return(&t.env_rewards, self.spec.discount))
            .collect()
    }

    /// True IHRs of every trajectory, if the dataset came from a simulator.
    pub fn true_ihrs(&self) -> Result<Vec<Vec<f64>>> {
        self.trajectories
            .iter()
            .map(|t| {
                t.true_ihrs
                    .clone()
                    .ok_or_else(|| Error::Missing("true IHRs".into()))
            })
            .collect()
    }

    /// Copy with oracle-only fields removed.
    pub fn without_oracle(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.trajectories {
            t.true_ihrs = None;
        }
        out
    }

    /// Sub-dataset with the given trajectories, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            spec: self.spec.clone(),
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
            provenance: self.provenance.clone(),
            seed: self.seed,
        }
    }
}
