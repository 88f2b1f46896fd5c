//! Cumulative importance weights and the importance-sampling estimators.

use serde::{Deserialize, Serialize};

use super::BehaviorModel;
use crate::error::{Error, Result};
use crate::hmdp::{discounted_return, OfflineDataset};
use crate::policy::Policy;

/// `cumulative[i][t] = ω_{0:t}`, optionally clipped at `clip`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    pub step_ratios: Vec<Vec<f64>>,
    pub cumulative: Vec<Vec<f64>>,
    pub clip: Option<f64>,
}

impl ImportanceWeights {
    /// Effective sample size of the full-trajectory weights.
    pub fn ess(&self) -> f64 {
        let (s, s2) = self
            .cumulative
            .iter()
            .filter_map(|w| w.last())
            .fold((0.0, 0.0), |(a, b), w| (a + w, b + w * w));
        if s2 == 0.0 {
            0.0
        } else {
            s * s / s2
        }
    }

    pub fn max_weight(&self) -> f64 {
        self.cumulative
            .iter()
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    }

    /// `ω_{0:t-1}`, with `ω_{0:-1} = 1`.
    pub fn before(&self, i: usize, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.cumulative[i][t - 1]
        }
    }
}

pub fn importance_weights(
    ds: &OfflineDataset,
    target: &Policy,
    behavior: &BehaviorModel,
    clip: Option<f64>,
) -> Result<ImportanceWeights> {
    if let Some(c) = clip {
        if !(c > 0.0) {
            return Err(Error::InvalidArgument("clip ceiling must be positive".into()));
        }
    }
    let mut step_ratios = Vec::with_capacity(ds.len());
    let mut cumulative = Vec::with_capacity(ds.len());
    for (i, traj) in ds.trajectories.iter().enumerate() {
        let mut ratios = Vec::with_capacity(traj.horizon());
        let mut cum = Vec::with_capacity(traj.horizon());
        let mut w = 1.0;
        for (t, (s, a)) in traj.states.iter().zip(&traj.actions).enumerate() {
            let b = match behavior {
                BehaviorModel::Logged => traj
                    .behavior_probs
                    .as_ref()
                    .ok_or_else(|| Error::Missing(format!("logged behavior probabilities in trajectory {i}")))?[t],
                BehaviorModel::Known(p) => p.action_prob(s, a)?,
                BehaviorModel::Estimated(e) => e.policy.action_prob(s, a)?,
            };
            if !(b > 0.0) {
                return Err(Error::ZeroBehaviorProb {
                    trajectory: i,
                    step: t,
                });
            }
            let r = target.action_prob(s, a)? / b;
            w *= r;
            ratios.push(r);
            cum.push(match clip {
                Some(c) => w.min(c),
                None => w,
            });
        }
        if cum.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("importance weights of trajectory {i}")));
        }
        step_ratios.push(ratios);
        cumulative.push(cum);
    }
    Ok(ImportanceWeights {
        step_ratios,
        cumulative,
        clip,
    })
}

fn check_rows(rewards: &[Vec<f64>], w: &ImportanceWeights) -> Result<()> {
    if rewards.len() != w.cumulative.len() {
        return Err(Error::LengthMismatch {
            left: rewards.len(),
            right: w.cumulative.len(),
        });
    }
    if rewards.is_empty() {
        return Err(Error::EmptySequence);
    }
    for (r, c) in rewards.iter().zip(&w.cumulative) {
        if r.len() != c.len() {
            return Err(Error::LengthMismatch {
                left: r.len(),
                right: c.len(),
            });
        }
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Per-trajectory terms `ω_{0:T-1} · G_i`.
pub fn is_terms(returns: &[f64], w: &ImportanceWeights) -> Result<Vec<f64>> {
    if returns.len() != w.cumulative.len() {
        return Err(Error::LengthMismatch {
            left: returns.len(),
            right: w.cumulative.len(),
        });
    }
    if returns.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(returns
        .iter()
        .zip(&w.cumulative)
        .map(|(g, c)| c.last().copied().unwrap_or(1.0) * g)
        .collect())
}

/// Vanilla importance sampling on whole returns.
pub fn is_vanilla(returns: &[f64], w: &ImportanceWeights) -> Result<f64> {
    Ok(mean(&is_terms(returns, w)?))
}

/// Vanilla importance sampling on the discounted sums of per-step rewards.
pub fn is_vanilla_rewards(rewards: &[Vec<f64>], discount: f64, w: &ImportanceWeights) -> Result<f64> {
    let returns = rewards
        .iter()
        .map(|r| discounted_return(r, discount))
        .collect::<Result<Vec<_>>>()?;
    is_vanilla(&returns, w)
}

/// Per-trajectory terms `Σ_t γ^t ω_{0:t} r_t`.
pub fn pdis_terms(rewards: &[Vec<f64>], discount: f64, w: &ImportanceWeights) -> Result<Vec<f64>> {
    check_rows(rewards, w)?;
    Ok(rewards
        .iter()
        .zip(&w.cumulative)
        .map(|(r, c)| {
            let mut g = 1.0;
            let mut total = 0.0;
            for (x, wt) in r.iter().zip(c) {
                total += g * wt * x;
                g *= discount;
            }
            total
        })
        .collect())
}

/// Per-decision importance sampling.
pub fn pdis(rewards: &[Vec<f64>], discount: f64, w: &ImportanceWeights) -> Result<f64> {
    Ok(mean(&pdis_terms(rewards, discount, w)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(ratios: Vec<Vec<f64>>) -> ImportanceWeights {
        let cumulative = ratios
            .iter()
            .map(|r| {
                r.iter()
                    .scan(1.0, |w, x| {
                        *w *= x;
                        Some(*w)
                    })
                    .collect()
            })
            .collect();
        ImportanceWeights {
            step_ratios: ratios,
            cumulative,
            clip: None,
        }
    }

    #[test]
    fn spec_examples() {
        let w = weights(vec![vec![2.0, 0.5]]);
        assert_eq!(is_vanilla(&[2.0], &w).unwrap(), 2.0);
        // γ = 1 is outside the spec domain but the formula is well defined
        assert_eq!(pdis(&[vec![1.0, 1.0]], 1.0, &w).unwrap(), 3.0);
    }

    #[test]
    fn unit_weights_give_sample_means() {
        let w = weights(vec![vec![1.0; 3]; 2]);
        let rewards = vec![vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 1.0]];
        let p = pdis(&rewards, 0.5, &w).unwrap();
        assert!((p - (2.75 + 0.25) / 2.0).abs() < 1e-12);
        assert_eq!(is_vanilla(&[4.0, 6.0], &w).unwrap(), 5.0);
        assert!((w.ess() - 2.0).abs() < 1e-12);
    }
}
