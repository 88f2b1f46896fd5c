use serde::{Deserialize, Serialize};

use super::fqe::QApprox;
use super::weights::ImportanceWeights;
use crate::error::{Error, Result};
use crate::hmdp::OfflineDataset;
use crate::policy::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DrForm {
    /// `Σ_t γ^t [ω_{0:t}(r_t − Q_t) + ω_{0:t−1} V_t]`.
    Standard,
    /// `Σ_t γ^t ω_{0:t} r_t − Σ_t (γ^t ω_{0:t} r_t Q_t − ω_{0:t−1} V_t)`, kept
    /// for auditing; it does not reduce to the control-variate estimator.
    Verbatim,
}

/// Per-trajectory doubly robust terms.
pub fn dr_terms(
    ds: &OfflineDataset,
    rewards: &[Vec<f64>],
    target: &Policy,
    w: &ImportanceWeights,
    q: &QApprox,
    form: DrForm,
) -> Result<Vec<f64>> {
    if rewards.len() != ds.len() || w.cumulative.len() != ds.len() {
        return Err(Error::LengthMismatch {
            left: rewards.len(),
            right: ds.len(),
        });
    }
    if ds.is_empty() {
        return Err(Error::EmptySequence);
    }
    let gamma = ds.spec.discount;
    let mut out = Vec::with_capacity(ds.len());
    for (i, (traj, r)) in ds.trajectories.iter().zip(rewards).enumerate() {
        if r.len() != traj.horizon() {
            return Err(Error::LengthMismatch {
                left: r.len(),
                right: traj.horizon(),
            });
        }
        let mut g = 1.0;
        let mut total = 0.0;
        for t in 0..traj.horizon() {
            let s = &traj.states[t];
            let qv = q.q(t, s, traj.actions[t].index()?)?;
            let vv = q.v(t, s, target)?;
            let wt = w.cumulative[i][t];
            let wb = w.before(i, t);
            total += match form {
                DrForm::Standard => g * (wt * (r[t] - qv) + wb * vv),
                DrForm::Verbatim => g * wt * r[t] - (g * wt * r[t] * qv - wb * vv),
            };
            g *= gamma;
        }
        out.push(total);
    }
    Ok(out)
}

pub fn dr(
    ds: &OfflineDataset,
    rewards: &[Vec<f64>],
    target: &Policy,
    w: &ImportanceWeights,
    q: &QApprox,
    form: DrForm,
) -> Result<f64> {
    let terms = dr_terms(ds, rewards, target, w, q, form)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}
