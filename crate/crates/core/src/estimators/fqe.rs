//! Fitted Q-evaluation with time-indexed Q functions.
//!
//! Each iteration refits every `Q_t` against targets `r_t + γ V_{t+1}(s_{t+1})`
//! computed from a frozen copy of the previous iterate, with `V_T ≡ 0`. In
//! tabular datasets the regression is an exact per-cell mean; cells never seen
//! at time `t` borrow the targets of the same `(s, a)` pooled over all times,
//! and pairs never seen at all stay at 0. Feature datasets use ridge
//! regression on `[φ(s), 1]` per `(t, a)`.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use opehf_diff::{Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmdp::{state_index, OfflineDataset};
use crate::policy::Policy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FqeConfig {
    pub max_iterations: usize,
    /// Stop once the sup-norm change between iterates falls below this.
    pub tolerance: f64,
    /// Ridge penalty of the linear regression (feature datasets only).
    pub ridge: f64,
}

impl Default for FqeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-10,
            ridge: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QApprox {
    /// `q[t][s][a]`.
    Tabular(Vec<Vec<Vec<f64>>>),
    /// `kappa[t][a]` over the design `[φ(s), 1]`.
    Linear(Vec<Vec<Vec<f64>>>),
}

impl QApprox {
    pub fn horizon(&self) -> usize {
        match self {
            QApprox::Tabular(q) | QApprox::Linear(q) => q.len(),
        }
    }

    /// `Q_t(s, a)`; zero at `t = T`.
    pub fn q(&self, t: usize, state: &[f64], action: usize) -> Result<f64> {
        if t >= self.horizon() {
            return Ok(0.0);
        }
        match self {
            QApprox::Tabular(q) => Ok(q[t][state_index(state)?][action]),
            QApprox::Linear(k) => {
                let w = &k[t][action];
                if w.len() != state.len() + 1 {
                    return Err(Error::DimensionMismatch("state length vs FQE weights".into()));
                }
                Ok(state.iter().zip(w).map(|(x, k)| x * k).sum::<f64>() + w[state.len()])
            }
        }
    }

    pub fn q_row(&self, t: usize, state: &[f64], num_actions: usize) -> Result<Vec<f64>> {
        (0..num_actions).map(|a| self.q(t, state, a)).collect()
    }

    /// `V_t(s) = Σ_a π(a|s) Q_t(s, a)`; zero at `t = T`.
    pub fn v(&self, t: usize, state: &[f64], policy: &Policy) -> Result<f64> {
        if t >= self.horizon() {
            return Ok(0.0);
        }
        self.v_with_probs(t, state, &policy.action_probs(state)?)
    }

    /// `V_t(s)` with `π(·|s)` supplied by the caller.
    pub fn v_with_probs(&self, t: usize, state: &[f64], probs: &[f64]) -> Result<f64> {
        if t >= self.horizon() {
            return Ok(0.0);
        }
        Ok(self
            .q_row(t, state, probs.len())?
            .iter()
            .zip(probs)
            .map(|(q, p)| q * p)
            .sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FqeResult {
    pub q: QApprox,
    pub value: f64,
    /// Sup-norm change of the last iteration.
    pub bellman_residual: f64,
    /// Residual after each iteration.
    pub residual_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Step<'a> {
    t: usize,
    state: &'a [f64],
    action: usize,
    reward: f64,
    next: &'a [f64],
}

fn steps<'a>(ds: &'a OfflineDataset, rewards: &[Vec<f64>]) -> Result<Vec<Step<'a>>> {
    if rewards.len() != ds.len() {
        return Err(Error::LengthMismatch {
            left: rewards.len(),
            right: ds.len(),
        });
    }
    let mut out = Vec::new();
    for (traj, r) in ds.trajectories.iter().zip(rewards) {
        if r.len() != traj.horizon() {
            return Err(Error::LengthMismatch {
                left: r.len(),
                right: traj.horizon(),
            });
        }
        for t in 0..traj.horizon() {
            out.push(Step {
                t,
                state: &traj.states[t],
                action: traj.actions[t].index()?,
                reward: r[t],
                next: &traj.states[t + 1],
            });
        }
    }
    Ok(out)
}

fn sup_change(a: &QApprox, b: &QApprox, probe: &[Step], na: usize) -> Result<f64> {
    match (a, b) {
        (QApprox::Tabular(x), QApprox::Tabular(y)) => Ok(x
            .iter()
            .flatten()
            .flatten()
            .zip(y.iter().flatten().flatten())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)),
        _ => {
            // Compare predictions at every logged (t, s) and action.
            let mut m: f64 = 0.0;
            for s in probe {
                for act in 0..na {
                    m = m.max((a.q(s.t, s.state, act)? - b.q(s.t, s.state, act)?).abs());
                }
            }
            Ok(m)
        }
    }
}

fn refit_tabular(
    data: &[Step],
    states: &[usize],
    targets: &[f64],
    ns: usize,
    na: usize,
    horizon: usize,
) -> QApprox {
    let mut sum = vec![vec![vec![0.0; na]; ns]; horizon];
    let mut cnt = vec![vec![vec![0usize; na]; ns]; horizon];
    let mut psum = vec![vec![0.0; na]; ns];
    let mut pcnt = vec![vec![0usize; na]; ns];
    for ((st, &s), y) in data.iter().zip(states).zip(targets) {
        sum[st.t][s][st.action] += y;
        cnt[st.t][s][st.action] += 1;
        psum[s][st.action] += y;
        pcnt[s][st.action] += 1;
    }
    let mut q = vec![vec![vec![0.0; na]; ns]; horizon];
    for t in 0..horizon {
        for s in 0..ns {
            for a in 0..na {
                q[t][s][a] = if cnt[t][s][a] > 0 {
                    sum[t][s][a] / cnt[t][s][a] as f64
                } else if pcnt[s][a] > 0 {
                    psum[s][a] / pcnt[s][a] as f64
                } else {
                    0.0
                };
            }
        }
    }
    QApprox::Tabular(q)
}

/// Tabular Bellman targets `r_t + γ V_{t+1}(s')` through a per-iteration
/// `V[t][s]` table; sums run in the same order as [`QApprox::v`].
fn tabular_targets(
    data: &[Step],
    next_states: &[usize],
    probs: &[Option<Vec<f64>>],
    q: &[Vec<Vec<f64>>],
    gamma: f64,
) -> Vec<f64> {
    let horizon = q.len();
    let v: Vec<Vec<f64>> = q
        .iter()
        .map(|qt| {
            qt.iter()
                .zip(probs)
                .map(|(row, p)| p.as_ref().map_or(0.0, |p| row.iter().zip(p).map(|(q, p)| q * p).sum()))
                .collect()
        })
        .collect();
    data.iter()
        .zip(next_states)
        .map(|(s, &n)| s.reward + gamma * if s.t + 1 >= horizon { 0.0 } else { v[s.t + 1][n] })
        .collect()
}

fn ridge_solve(rows: &[(&[f64], f64)], p: usize, ridge: f64) -> Result<Vec<f64>> {
    let mut xtx = DMatrix::<f64>::identity(p, p) * ridge;
    let mut xty = DVector::<f64>::zeros(p);
    for (s, y) in rows {
        let x: Vec<f64> = s.iter().copied().chain(std::iter::once(1.0)).collect();
        for i in 0..p {
            xty[i] += x[i] * y;
            for j in 0..p {
                xtx[(i, j)] += x[i] * x[j];
            }
        }
    }
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::NonFinite("FQE normal equations".into()))?;
    Ok(chol.solve(&xty).iter().copied().collect())
}

fn refit_linear(
    data: &[Step],
    targets: &[f64],
    p: usize,
    na: usize,
    horizon: usize,
    ridge: f64,
) -> Result<QApprox> {
    let mut kappa = vec![vec![vec![0.0; p]; na]; horizon];
    for a in 0..na {
        let pooled: Vec<(&[f64], f64)> = data
            .iter()
            .zip(targets)
            .filter(|(s, _)| s.action == a)
            .map(|(s, y)| (s.state, *y))
            .collect();
        if pooled.is_empty() {
            continue;
        }
        let pooled_fit = ridge_solve(&pooled, p, ridge)?;
        for (t, k) in kappa.iter_mut().enumerate() {
            let rows: Vec<(&[f64], f64)> = data
                .iter()
                .zip(targets)
                .filter(|(s, _)| s.action == a && s.t == t)
                .map(|(s, y)| (s.state, *y))
                .collect();
            k[a] = if rows.len() >= p {
                ridge_solve(&rows, p, ridge)?
            } else {
                pooled_fit.clone()
            };
        }
    }
    Ok(QApprox::Linear(kappa))
}

/// Fitted Q-evaluation of `target` on per-step `rewards`.
pub fn fqe(ds: &OfflineDataset, rewards: &[Vec<f64>], target: &Policy, cfg: &FqeConfig) -> Result<FqeResult> {
    if ds.is_empty() {
        return Err(Error::EmptySequence);
    }
    let na = ds.spec.num_actions()?;
    let horizon = ds.spec.horizon;
    let gamma = ds.spec.discount;
    let data = steps(ds, rewards)?;
    let mut q = match ds.spec.num_states() {
        Some(ns) => QApprox::Tabular(vec![vec![vec![0.0; na]; ns]; horizon]),
        None => QApprox::Linear(vec![vec![vec![0.0; ds.spec.state_len() + 1]; na]; horizon]),
    };
    // Tabular data is indexed once; every next state's action probabilities
    // are computed once since the target policy is fixed.
    let tabular = match ds.spec.num_states() {
        Some(ns) => {
            let states = data.iter().map(|s| state_index(s.state)).collect::<Result<Vec<_>>>()?;
            let next = data.iter().map(|s| state_index(s.next)).collect::<Result<Vec<_>>>()?;
            let mut probs: Vec<Option<Vec<f64>>> = vec![None; ns];
            for (s, &n) in data.iter().zip(&next) {
                if probs[n].is_none() {
                    probs[n] = Some(target.action_probs(s.next)?);
                }
            }
            Some((ns, states, next, probs))
        }
        None => None,
    };
    let next_probs = if tabular.is_none() {
        data.iter().map(|s| target.action_probs(s.next)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iterations.max(1) {
        let next = match (&tabular, &q) {
            (Some((ns, states, next, probs)), QApprox::Tabular(qt)) => {
                let targets = tabular_targets(&data, next, probs, qt, gamma);
                refit_tabular(&data, states, &targets, *ns, na, horizon)
            }
            _ => {
                let targets = data
                    .iter()
                    .zip(&next_probs)
                    .map(|(s, p)| Ok(s.reward + gamma * q.v_with_probs(s.t + 1, s.next, p)?))
                    .collect::<Result<Vec<f64>>>()?;
                refit_linear(&data, &targets, ds.spec.state_len() + 1, na, horizon, cfg.ridge)?
            }
        };
        let change = sup_change(&next, &q, &data, na)?;
        q = next;
        history.push(change);
        if !change.is_finite() {
            return Err(Error::NonFinite("FQE iterate".into()));
        }
        if change <= cfg.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "FQE stopped after {} iterations with residual {:e}",
            history.len(),
            history.last().copied().unwrap_or(f64::NAN)
        );
    }
    let value = ds
        .trajectories
        .iter()
        .map(|t| q.v(0, &t.states[0], target))
        .sum::<Result<f64>>()?
        / ds.len() as f64;
    Ok(FqeResult {
        q,
        value,
        bellman_residual: history.last().copied().unwrap_or(0.0),
        iterations: history.len(),
        residual_history: history,
        converged,
    })
}

/// `mean((X κ − y)²) + ridge · ‖κ‖²`, the per-`(t, a)` FQE regression loss as a
/// graph node. `x` is `n × p`, `y` is `n × 1`, `kappa` is `p × 1`.
pub fn fqe_regression_loss(g: &mut Graph, kappa: Var, x: &Array2<f64>, y: &Array2<f64>, ridge: f64) -> Var {
    let xv = g.leaf(x.clone());
    let yv = g.leaf(y.clone());
    let pred = g.matmul(xv, kappa);
    let err = g.sub(pred, yv);
    let sq = g.square(err);
    let fit = g.mean(sq);
    let k2 = g.square(kappa);
    let pen = g.sum(k2);
    let pen = g.scale(pen, ridge);
    g.add(fit, pen)
}
