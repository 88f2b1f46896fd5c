//! Finite-horizon dynamic programming over a finite state-action model.

use crate::error::{Error, Result};

/// Finite model with expected per-step human reward `reward_mean[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteModel {
    pub num_states: usize,
    pub num_actions: usize,
    /// `transition[s][a][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
    pub initial_dist: Vec<f64>,
    pub reward_mean: Vec<Vec<f64>>,
    pub discount: f64,
    pub horizon: usize,
}

impl FiniteModel {
    fn check_policy(&self, pi: &[Vec<f64>]) -> Result<()> {
        if pi.len() != self.num_states || pi.iter().any(|r| r.len() != self.num_actions) {
            return Err(Error::DimensionMismatch(format!(
                "policy table must be {}x{}",
                self.num_states, self.num_actions
            )));
        }
        Ok(())
    }

    /// `d_t(s, a) = P(s_t = s, a_t = a)` for `t = 0..T`.
    pub fn occupancy_by_time(&self, pi: &[Vec<f64>]) -> Result<Vec<Vec<Vec<f64>>>> {
        self.check_policy(pi)?;
        let (ns, na) = (self.num_states, self.num_actions);
        let mut out = Vec::with_capacity(self.horizon);
        let mut state = self.initial_dist.clone();
        for _ in 0..self.horizon {
            let d: Vec<Vec<f64>> = (0..ns)
                .map(|s| (0..na).map(|a| state[s] * pi[s][a]).collect())
                .collect();
            let mut next = vec![0.0; ns];
            for s in 0..ns {
                for a in 0..na {
                    let m = d[s][a];
                    if m == 0.0 {
                        continue;
                    }
                    for (n, p) in next.iter_mut().zip(&self.transition[s][a]) {
                        *n += m * p;
                    }
                }
            }
            out.push(d);
            state = next;
        }
        Ok(out)
    }

    /// `E[Σ_t γ^t r_t]` under the stationary policy table `pi`.
    pub fn policy_value(&self, pi: &[Vec<f64>]) -> Result<f64> {
        let occ = self.occupancy_by_time(pi)?;
        let mut g = 1.0;
        let mut v = 0.0;
        for d in &occ {
            for (ds, rs) in d.iter().zip(&self.reward_mean) {
                v += g * ds.iter().zip(rs).map(|(x, r)| x * r).sum::<f64>();
            }
            g *= self.discount;
        }
        Ok(v)
    }

    /// Discount-weighted occupancy normalized to sum to one.
    pub fn visitation(&self, pi: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let occ = self.occupancy_by_time(pi)?;
        let mut out = vec![vec![0.0; self.num_actions]; self.num_states];
        let mut g = 1.0;
        let mut total = 0.0;
        for d in &occ {
            for (o, ds) in out.iter_mut().zip(d) {
                for (x, y) in o.iter_mut().zip(ds) {
                    *x += g * y;
                }
            }
            total += g;
            g *= self.discount;
        }
        for x in out.iter_mut().flatten() {
            *x /= total;
        }
        Ok(out)
    }

    /// Time-indexed `Q_t(s, a)` for `t = 0..T` by backward induction.
    pub fn q_values(&self, pi: &[Vec<f64>]) -> Result<Vec<Vec<Vec<f64>>>> {
        self.check_policy(pi)?;
        let (ns, na) = (self.num_states, self.num_actions);
        let mut q = vec![vec![vec![0.0; na]; ns]; self.horizon];
        let mut v_next = vec![0.0; ns];
        for t in (0..self.horizon).rev() {
            for s in 0..ns {
                for a in 0..na {
                    let ev: f64 = self.transition[s][a]
                        .iter()
                        .zip(&v_next)
                        .map(|(p, v)| p * v)
                        .sum();
                    q[t][s][a] = self.reward_mean[s][a] + self.discount * ev;
                }
            }
            v_next = (0..ns)
                .map(|s| (0..na).map(|a| pi[s][a] * q[t][s][a]).sum())
                .collect();
        }
        Ok(q)
    }

    /// Greedy stationary policy from discounted value iteration; `maximize =
    /// false` gives the worst deterministic policy. Ties go to the lowest action.
    pub fn greedy_stationary(&self, maximize: bool) -> Vec<usize> {
        let (ns, na) = (self.num_states, self.num_actions);
        let sign = if maximize { 1.0 } else { -1.0 };
        let mut v = vec![0.0; ns];
        let mut q = vec![vec![0.0; na]; ns];
        for _ in 0..10_000 {
            for s in 0..ns {
                for a in 0..na {
                    let ev: f64 = self.transition[s][a]
                        .iter()
                        .zip(&v)
                        .map(|(p, x)| p * x)
                        .sum();
                    q[s][a] = sign * self.reward_mean[s][a] + self.discount * ev;
                }
            }
            let nv: Vec<f64> = q
                .iter()
                .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let delta = nv
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = nv;
            if delta < 1e-12 {
                break;
            }
        }
        q.iter()
            .map(|r| {
                let mut best = 0;
                for a in 1..na {
                    if r[a] > r[best] {
                        best = a;
                    }
                }
                best
            })
            .collect()
    }
}
