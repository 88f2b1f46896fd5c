//! Occupancy-ratio correction through an empirical model.
//!
//! `d^π` is propagated through the pooled empirical transition model from the
//! empirical initial distribution; `d^β` is the empirical discounted
//! occupancy. Both are normalized by `Σ_t γ^t`, so the ratio-weighted sum of
//! discounted rewards estimates the discounted return.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmdp::{state_index, OfflineDataset};
use crate::policy::Policy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiceConfig {
    /// Ratio cap `R_max`.
    pub max_ratio: f64,
    /// Bins per feature dimension when discretizing feature states.
    pub bins: usize,
}

impl Default for DiceConfig {
    fn default() -> Self {
        Self {
            max_ratio: 100.0,
            bins: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    /// `ratio[c][a]`, capped at `max_ratio`; zero where `d^β = 0`.
    pub ratio: Vec<Vec<f64>>,
    pub d_pi: Vec<Vec<f64>>,
    pub d_beta: Vec<Vec<f64>>,
    /// `d^β > 0` per cell and action.
    pub support: Vec<Vec<bool>>,
    /// State vector used to query `π` in each cell.
    pub representatives: Vec<Vec<f64>>,
    /// Pairs with `d^π > 0` but no logged visits; their mass is dropped.
    pub coverage_violations: usize,
    /// `E_{d^β}[ratio]`.
    pub normalization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceResult {
    pub estimate: f64,
    pub ratios: RatioEstimate,
}

/// Maps each logged state to a cell id.
struct Cells {
    ids: Vec<Vec<usize>>,
    representatives: Vec<Vec<f64>>,
}

fn cells(ds: &OfflineDataset, bins: usize) -> Result<Cells> {
    if let Some(ns) = ds.spec.num_states() {
        let ids = ds
            .trajectories
            .iter()
            .map(|t| t.states.iter().map(|s| state_index(s)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        return Ok(Cells {
            ids,
            representatives: (0..ns).map(|s| vec![s as f64]).collect(),
        });
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("DICE needs at least one bin".into()));
    }
    let d = ds.spec.state_len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for s in ds.trajectories.iter().flat_map(|t| &t.states) {
        for j in 0..d {
            lo[j] = lo[j].min(s[j]);
            hi[j] = hi[j].max(s[j]);
        }
    }
    let key = |s: &[f64]| -> Vec<usize> {
        (0..d)
            .map(|j| {
                let w = hi[j] - lo[j];
                if w <= 0.0 {
                    0
                } else {
                    (((s[j] - lo[j]) / w * bins as f64) as usize).min(bins - 1)
                }
            })
            .collect()
    };
    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut representatives = Vec::new();
    let mut ids = Vec::with_capacity(ds.len());
    for t in &ds.trajectories {
        let mut row = Vec::with_capacity(t.states.len());
        for s in &t.states {
            let k = key(s);
            let next = index.len();
            let id = *index.entry(k).or_insert_with(|| {
                representatives.push(s.clone());
                next
            });
            row.push(id);
        }
        ids.push(row);
    }
    Ok(Cells { ids, representatives })
}

pub fn dice(ds: &OfflineDataset, rewards: &[Vec<f64>], target: &Policy, cfg: &DiceConfig) -> Result<DiceResult> {
    if ds.is_empty() {
        return Err(Error::EmptySequence);
    }
    if rewards.len() != ds.len() {
        return Err(Error::LengthMismatch {
            left: rewards.len(),
            right: ds.len(),
        });
    }
    let na = ds.spec.num_actions()?;
    let horizon = ds.spec.horizon;
    let gamma = ds.spec.discount;
    let c = cells(ds, cfg.bins)?;
    let nc = c.representatives.len();
    let n = ds.len() as f64;
    let norm: f64 = (0..horizon).map(|t| gamma.powi(t as i32)).sum();

    let mut init = vec![0.0; nc];
    let mut counts = vec![vec![vec![0.0; nc]; na]; nc];
    let mut d_beta = vec![vec![0.0; na]; nc];
    for (traj, ids) in ds.trajectories.iter().zip(&c.ids) {
        init[ids[0]] += 1.0 / n;
        let mut g = 1.0;
        for t in 0..traj.horizon() {
            let a = traj.actions[t].index()?;
            counts[ids[t]][a][ids[t + 1]] += 1.0;
            d_beta[ids[t]][a] += g / (n * norm);
            g *= gamma;
        }
    }

    let pi = c
        .representatives
        .iter()
        .map(|s| target.action_probs(s))
        .collect::<Result<Vec<_>>>()?;
    let mut d_pi = vec![vec![0.0; na]; nc];
    let mut violation = vec![vec![false; na]; nc];
    let mut state = init;
    let mut g = 1.0;
    for _ in 0..horizon {
        let mut next = vec![0.0; nc];
        for s in 0..nc {
            if state[s] == 0.0 {
                continue;
            }
            for a in 0..na {
                let m = state[s] * pi[s][a];
                if m == 0.0 {
                    continue;
                }
                d_pi[s][a] += g * m / norm;
                let total: f64 = counts[s][a].iter().sum();
                if total == 0.0 {
                    violation[s][a] = true;
                    continue;
                }
                for (x, k) in next.iter_mut().zip(&counts[s][a]) {
                    *x += m * k / total;
                }
            }
        }
        state = next;
        g *= gamma;
    }

    let mut ratio = vec![vec![0.0; na]; nc];
    let mut support = vec![vec![false; na]; nc];
    let mut coverage_violations = 0;
    let mut normalization = 0.0;
    for s in 0..nc {
        for a in 0..na {
            if d_beta[s][a] > 0.0 {
                support[s][a] = true;
                ratio[s][a] = (d_pi[s][a] / d_beta[s][a]).min(cfg.max_ratio);
                normalization += d_beta[s][a] * ratio[s][a];
            } else if d_pi[s][a] > 0.0 || violation[s][a] {
                coverage_violations += 1;
            }
        }
    }

    let mut total = 0.0;
    for ((traj, ids), r) in ds.trajectories.iter().zip(&c.ids).zip(rewards) {
        if r.len() != traj.horizon() {
            return Err(Error::LengthMismatch {
                left: r.len(),
                right: traj.horizon(),
            });
        }
        let mut g = 1.0;
        for t in 0..traj.horizon() {
            total += g * ratio[ids[t]][traj.actions[t].index()?] * r[t];
            g *= gamma;
        }
    }
    Ok(DiceResult {
        estimate: total / n,
        ratios: RatioEstimate {
            ratio,
            d_pi,
            d_beta,
            support,
            representatives: c.representatives,
            coverage_violations,
            normalization,
        },
    })
}
