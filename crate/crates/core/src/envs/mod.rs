//! Simulated human-feedback environments with exact oracles.

pub mod confounder;
pub mod oracle;
pub mod suite;
pub mod tabular;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use confounder::{ConfounderConfig, LatentConfounderEnv};
pub use oracle::FiniteModel;
pub use suite::{
    build_problem, make_benchmark_suite, BenchmarkProblem, EnvConfig, PolicyConfig, TargetPolicy,
};
pub use tabular::{sample_truncated, truncated_mean, TabularHmdp};

use crate::error::{Error, Result};
use crate::hmdp::{HmdpSpec, OfflineDataset, Trajectory};
use crate::policy::Policy;
use crate::seed::stage_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Env {
    Tabular(TabularHmdp),
    Confounder(LatentConfounderEnv),
}

impl Env {
    pub fn spec(&self) -> HmdpSpec {
        match self {
            Env::Tabular(e) => e.spec(),
            Env::Confounder(e) => e.spec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Env::Tabular(e) => e.validate(),
            Env::Confounder(e) => e.validate(),
        }
    }

    pub fn sample_episode<R: Rng + ?Sized>(&self, policy: &Policy, rng: &mut R) -> Result<Trajectory> {
        match self {
            Env::Tabular(e) => e.sample_episode(policy, rng),
            Env::Confounder(e) => e.sample_episode(policy, rng),
        }
    }

    /// Finite model over the observed states with expected IHRs.
    pub fn model(&self) -> FiniteModel {
        match self {
            Env::Tabular(e) => e.model(),
            Env::Confounder(e) => e.model(),
        }
    }

    /// Emitted state vector for each model state index.
    pub fn state_reprs(&self) -> Vec<Vec<f64>> {
        match self {
            Env::Tabular(e) => (0..e.num_states).map(|s| vec![s as f64]).collect(),
            Env::Confounder(e) => e.state_reprs(),
        }
    }

    /// Action table of `policy` at every model state.
    pub fn policy_table(&self, policy: &Policy) -> Result<Vec<Vec<f64>>> {
        let model = self.model();
        if policy.num_actions() != model.num_actions {
            return Err(Error::DimensionMismatch("policy action count".into()));
        }
        policy.prob_table(&self.state_reprs())
    }
}

/// Exact `E[Σ_t γ^t r^H_t]` by finite-horizon dynamic programming.
pub fn exact_policy_human_value(env: &Env, policy: &Policy) -> Result<f64> {
    env.model().policy_value(&env.policy_table(policy)?)
}

/// Normalized discounted state-action occupancy, indexed `[s][a]`.
pub fn exact_visitation(env: &Env, policy: &Policy) -> Result<Vec<Vec<f64>>> {
    env.model().visitation(&env.policy_table(policy)?)
}

/// Same as [`exact_policy_human_value`] for a plain tabular HMDP.
pub fn tabular_value(env: &TabularHmdp, policy: &Policy) -> Result<f64> {
    exact_policy_human_value(&Env::Tabular(env.clone()), policy)
}

pub fn sample_episode<R: Rng + ?Sized>(env: &Env, policy: &Policy, rng: &mut R) -> Result<Trajectory> {
    env.sample_episode(policy, rng)
}

/// `n` episodes; episode `i` draws from the stream `(seed, "episode", i)`.
pub fn generate_dataset(
    env: &Env,
    policy: &Policy,
    n: usize,
    seed: u64,
    provenance: &str,
) -> Result<OfflineDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be positive".into()));
    }
    let trajectories = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stage_rng(seed, "episode", i as u64);
            env.sample_episode(policy, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    OfflineDataset::new(env.spec(), trajectories, provenance, seed)
}
