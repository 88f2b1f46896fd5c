//! The bidirectional reconstructor and its objective.
//!
//! Output parameterization: `r̂_t = u·G + s·u·o_t`, where `u = (1−γ)/(1−γ^T)`
//! spreads the return evenly in discounted time and `o_t` is the network
//! output. With a zero-initialized output layer the discounted-sum
//! constraint holds exactly at the start of training, and the network only
//! has to learn deviations of per-step scale.

use std::f64::consts::PI;

use ndarray::Array2;
use opehf_diff::{bidirectional_forward, Activation, BiRecurrent, Bound, Graph, Mlp, ParameterSet, Var};
use rand::SeedableRng;
use rayon::prelude::*;

use super::RilrConfig;
use crate::error::{Error, Result};
use crate::hmdp::{state_index, HmdpSpec, OfflineDataset, Trajectory};
use crate::seed::derive_seed;
use crate::vlmh::Scaler;

/// Per-step regularizer targets: for trajectory `i`, step `t`, the mean
/// `ȳ` of the `K` neighbor targets and their spread `Σ_j (y_j − ȳ)²`.
/// Together they give `Σ_j (r − y_j)² = K (r − ȳ)² + spread` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTargets {
    pub k: usize,
    pub mean: Vec<Vec<f64>>,
    pub spread: Vec<Vec<f64>>,
}

impl NeighborTargets {
    /// From explicit target lists `values[i][t] = [y_0, …, y_{K−1}]`.
    pub fn from_values(values: &[Vec<Vec<f64>>]) -> Result<Self> {
        let k = values
            .first()
            .and_then(|v| v.first())
            .map(Vec::len)
            .ok_or_else(|| Error::Missing("neighbor targets".into()))?;
        if k == 0 {
            return Err(Error::Missing("neighbor targets".into()));
        }
        let mut mean = Vec::with_capacity(values.len());
        let mut spread = Vec::with_capacity(values.len());
        for traj in values {
            let mut m = Vec::with_capacity(traj.len());
            let mut s = Vec::with_capacity(traj.len());
            for ys in traj {
                if ys.len() != k {
                    return Err(Error::LengthMismatch { left: ys.len(), right: k });
                }
                let ybar = ys.iter().sum::<f64>() / k as f64;
                m.push(ybar);
                s.push(ys.iter().map(|y| (y - ybar).powi(2)).sum());
            }
            mean.push(m);
            spread.push(s);
        }
        Ok(Self { k, mean, spread })
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            k: self.k,
            mean: idx.iter().map(|&i| self.mean[i].clone()).collect(),
            spread: idx.iter().map(|&i| self.spread[i].clone()).collect(),
        }
    }
}

/// `Σ_j −log N(r ; y_j, σ²)` for one step: the regularizer before scaling
/// by `C`.
pub fn regularizer_term(r_hat: f64, targets: &[f64], sigma: f64) -> f64 {
    let c = 0.5 * (2.0 * PI * sigma * sigma).ln();
    targets
        .iter()
        .map(|y| (r_hat - y).powi(2) / (2.0 * sigma * sigma) + c)
        .sum()
}

/// Free-function form of [`Reconstructor::loss`].
pub fn rilr_loss(model: &Reconstructor, g: &mut Graph, p: &Bound, batch: &RilrBatch) -> Result<RilrLoss> {
    model.loss(g, p, batch)
}

/// Network inputs for a minibatch, time-major.
#[derive(Debug, Clone)]
pub struct RilrBatch {
    /// `T` blocks of `b × in_dim`.
    pub inputs: Vec<Array2<f64>>,
    /// Raw human returns, `b × 1`.
    pub returns: Array2<f64>,
    /// `T` blocks of `b × 1` neighbor-target means; empty when absent.
    pub target_mean: Vec<Array2<f64>>,
    /// `Σ_t spread_t`, `b × 1`.
    pub target_spread: Array2<f64>,
}

impl RilrBatch {
    pub fn len(&self) -> usize {
        self.returns.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss pieces per trajectory (`b × 1` each).
#[derive(Debug, Clone)]
pub struct RilrLoss {
    pub total: Var,
    pub sum_term: Var,
    pub reg_term: Var,
    pub r_hat: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Reconstructor {
    pub config: RilrConfig,
    pub num_states: Option<usize>,
    pub state_dim: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub discount: f64,
    pub state_scaler: Scaler,
    pub reward_scaler: Scaler,
    pub return_scaler: Scaler,
    /// `u = (1−γ)/(1−γ^T)`.
    pub unit: f64,
    /// Scale `s` of the learned deviation.
    pub scale: f64,
    pub sigma_sum: f64,
    pub sigma_reg: f64,
    /// Per-step target multiplier: `1−γ`, or `u` with the finite-horizon flag.
    pub target_factor: f64,
    pub rnn: BiRecurrent,
    pub head: Mlp,
    pub params: ParameterSet,
}

fn unit_share(discount: f64, horizon: usize) -> f64 {
    if (1.0 - discount).abs() < 1e-12 {
        1.0 / horizon as f64
    } else {
        (1.0 - discount) / (1.0 - discount.powi(horizon as i32))
    }
}

impl Reconstructor {
    /// Fresh reconstructor for datasets shaped like `ds`. Scalers and the
    /// default likelihood widths come from `ds`.
    pub fn new(ds: &OfflineDataset, config: RilrConfig) -> Result<Self> {
        config.validate()?;
        if ds.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let spec = &ds.spec;
        let num_actions = spec.num_actions()?;
        let num_states = spec.num_states();
        let state_dim = num_states.unwrap_or(spec.state_len());
        let returns = ds.human_returns();
        let g_mean = returns.iter().sum::<f64>() / returns.len() as f64;
        let g_std = (returns.iter().map(|g| (g - g_mean).powi(2)).sum::<f64>() / returns.len() as f64).sqrt();
        let floor = 0.01 * (1.0 + g_mean.abs());
        let unit = unit_share(spec.discount, spec.horizon);
        let scale = g_std.max(floor);
        let sigma_sum = config.sigma_sum.unwrap_or((0.1 * g_std).max(floor));
        let sigma_reg = config.sigma_reg.unwrap_or(unit * scale);
        let target_factor = if config.finite_horizon_target {
            unit
        } else {
            1.0 - spec.discount
        };

        let rows: Vec<&[f64]> = ds
            .trajectories
            .iter()
            .flat_map(|t| t.states[..t.horizon()].iter().map(|s| s.as_slice()))
            .collect();
        let rewards: Vec<[f64; 1]> = ds
            .trajectories
            .iter()
            .flat_map(|t| t.env_rewards.iter().map(|r| [*r]))
            .collect();
        let ret_rows: Vec<[f64; 1]> = returns.iter().map(|g| [*g]).collect();
        let state_scaler = if num_states.is_some() {
            Scaler::identity(state_dim)
        } else {
            Scaler::fit(&rows, state_dim)
        };
        let reward_scaler = Scaler::fit(&rewards.iter().map(|r| r.as_slice()).collect::<Vec<_>>(), 1);
        let return_scaler = Scaler::fit(&ret_rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>(), 1);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "rilr-init", 0));
        let mut params = ParameterSet::new();
        let in_dim = state_dim + num_actions + 2;
        let hs = config.hidden_size;
        let rnn = BiRecurrent::new(&mut params, "rilr_rnn", config.cell, in_dim, hs, &mut rng);
        let head = Mlp::new(&mut params, "rilr_head", 2 * hs, &[hs], 1, Activation::Tanh, &mut rng);
        params.value_mut(head.out.w).fill(0.0);
        params.value_mut(head.out.b).fill(0.0);
        Ok(Self {
            config,
            num_states,
            state_dim,
            num_actions,
            horizon: spec.horizon,
            discount: spec.discount,
            state_scaler,
            reward_scaler,
            return_scaler,
            unit,
            scale,
            sigma_sum,
            sigma_reg,
            target_factor,
            rnn,
            head,
            params,
        })
    }

    pub fn check_spec(&self, spec: &HmdpSpec) -> Result<()> {
        let state_dim = spec.num_states().unwrap_or(spec.state_len());
        if spec.horizon != self.horizon
            || spec.num_states() != self.num_states
            || state_dim != self.state_dim
            || spec.num_actions()? != self.num_actions
        {
            return Err(Error::DimensionMismatch("dataset does not match the reconstructor".into()));
        }
        Ok(())
    }

    fn encode_state(&self, s: &[f64], out: &mut [f64]) -> Result<()> {
        match self.num_states {
            Some(ns) => {
                let i = state_index(s)?;
                if i >= ns {
                    return Err(Error::DimensionMismatch(format!("state {i} outside {ns} states")));
                }
                out[i] = 1.0;
            }
            None => {
                if s.len() != self.state_dim {
                    return Err(Error::DimensionMismatch("state length".into()));
                }
                for (j, x) in s.iter().enumerate() {
                    out[j] = self.state_scaler.apply(j, *x);
                }
            }
        }
        Ok(())
    }

    /// Inputs `[state, action one-hot, scaled r_t, scaled G]` per step,
    /// plus neighbor targets when given (indexed like `trajs`).
    pub fn batch(&self, trajs: &[&Trajectory], targets: Option<&NeighborTargets>) -> Result<RilrBatch> {
        let b = trajs.len();
        let (sd, na) = (self.state_dim, self.num_actions);
        let in_dim = sd + na + 2;
        let mut inputs = vec![Array2::zeros((b, in_dim)); self.horizon];
        let mut returns = Array2::zeros((b, 1));
        let mut target_mean = Vec::new();
        let mut target_spread = Array2::zeros((b, 1));
        if let Some(tg) = targets {
            if tg.mean.len() != b {
                return Err(Error::Missing("neighbor targets for every trajectory".into()));
            }
            target_mean = vec![Array2::zeros((b, 1)); self.horizon];
        }
        for (i, tr) in trajs.iter().enumerate() {
            if tr.horizon() != self.horizon {
                return Err(Error::LengthMismatch {
                    left: tr.horizon(),
                    right: self.horizon,
                });
            }
            let g = self.return_scaler.apply(0, tr.human_return);
            returns[[i, 0]] = tr.human_return;
            for t in 0..self.horizon {
                let mut row = inputs[t].row_mut(i);
                let row = row.as_slice_mut().ok_or_else(|| Error::InvalidArgument("layout".into()))?;
                self.encode_state(&tr.states[t], &mut row[..sd])?;
                let a = tr.actions[t].index()?;
                if a >= na {
                    return Err(Error::DimensionMismatch(format!("action {a} outside {na}")));
                }
                row[sd + a] = 1.0;
                row[sd + na] = self.reward_scaler.apply(0, tr.env_rewards[t]);
                row[sd + na + 1] = g;
            }
            if let Some(tg) = targets {
                if tg.mean[i].len() != self.horizon || tg.spread[i].len() != self.horizon {
                    return Err(Error::Missing(format!("neighbor targets for trajectory {i}")));
                }
                for t in 0..self.horizon {
                    target_mean[t][[i, 0]] = tg.mean[i][t];
                }
                target_spread[[i, 0]] = tg.spread[i].iter().sum();
            }
        }
        Ok(RilrBatch {
            inputs,
            returns,
            target_mean,
            target_spread,
        })
    }

    /// Per-step reconstructions `r̂_t`, each `b × 1`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &RilrBatch) -> Result<Vec<Var>> {
        let xs: Vec<Var> = batch.inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let hs = bidirectional_forward(&self.rnn, g, p, &xs)?;
        let gv = g.leaf(batch.returns.clone());
        let base = g.scale(gv, self.unit);
        Ok(hs
            .into_iter()
            .map(|h| {
                let o = self.head.forward(g, p, h);
                let d = g.scale(o, self.scale * self.unit);
                g.add(base, d)
            })
            .collect())
    }

    /// Negative log objective per trajectory: a Gaussian likelihood on the
    /// discounted sum plus `C` times the neighbor regularizer.
    pub fn loss(&self, g: &mut Graph, p: &Bound, batch: &RilrBatch) -> Result<RilrLoss> {
        if batch.target_mean.len() != self.horizon {
            return Err(Error::Missing("neighbor targets".into()));
        }
        let r_hat = self.forward(g, p, batch)?;
        let gv = g.leaf(batch.returns.clone());
        let mut disc = g.scale(r_hat[0], 1.0);
        let mut w = 1.0;
        for r in &r_hat[1..] {
            w *= self.discount;
            let term = g.scale(*r, w);
            disc = g.add(disc, term);
        }
        let res = g.sub(disc, gv);
        let sq = g.square(res);
        let ss = self.sigma_sum * self.sigma_sum;
        let sum_term = g.scale(sq, 0.5 / ss);
        let sum_term = g.add_scalar(sum_term, 0.5 * (2.0 * PI * ss).ln());

        let k = self.config.neighbors as f64;
        let c = self.config.regularizer_weight;
        let sr = self.sigma_reg * self.sigma_reg;
        let mut acc = g.leaf(batch.target_spread.clone());
        for (r, y) in r_hat.iter().zip(&batch.target_mean) {
            let y = g.leaf(y.clone());
            let d = g.sub(*r, y);
            let d2 = g.square(d);
            let d2 = g.scale(d2, k);
            acc = g.add(acc, d2);
        }
        let reg = g.scale(acc, c * 0.5 / sr);
        let reg_term = g.add_scalar(reg, c * k * self.horizon as f64 * 0.5 * (2.0 * PI * sr).ln());
        let total = g.add(sum_term, reg_term);
        Ok(RilrLoss {
            total,
            sum_term,
            reg_term,
            r_hat,
        })
    }

    /// Reconstructed IHRs of every trajectory in `ds`.
    pub fn reconstruct(&self, ds: &OfflineDataset) -> Result<Vec<Vec<f64>>> {
        self.check_spec(&ds.spec)?;
        let trajs: Vec<&Trajectory> = ds.trajectories.iter().collect();
        let blocks = trajs
            .par_chunks(self.config.batch_size.max(1))
            .map(|c| {
                let batch = self.batch(c, None)?;
                let mut g = Graph::new();
                let p = self.params.bind(&mut g);
                let r = self.forward(&mut g, &p, &batch)?;
                Ok((0..c.len())
                    .map(|i| r.iter().map(|v| g.value(*v)[[i, 0]]).collect::<Vec<f64>>())
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let out: Vec<Vec<f64>> = blocks.into_iter().flatten().collect();
        if out.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("reconstructed IHRs".into()));
        }
        Ok(out)
    }

    /// Mean loss over `trajs` with matching targets.
    pub fn mean_loss(&self, trajs: &[&Trajectory], targets: &NeighborTargets) -> Result<f64> {
        if trajs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let chunk = self.config.batch_size.max(1);
        let idx: Vec<usize> = (0..trajs.len()).collect();
        let parts = idx
            .par_chunks(chunk)
            .map(|c| {
                let tr: Vec<&Trajectory> = c.iter().map(|&i| trajs[i]).collect();
                let batch = self.batch(&tr, Some(&targets.subset(c)))?;
                let mut g = Graph::new();
                let p = self.params.bind(&mut g);
                let l = self.loss(&mut g, &p, &batch)?;
                Ok(g.value(l.total).sum())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(parts.iter().sum::<f64>() / trajs.len() as f64)
    }
}
