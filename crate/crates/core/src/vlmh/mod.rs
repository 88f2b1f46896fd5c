//! Variational latent model with human returns.
//!
//! The encoder infers `q(z_0|s_0)` and `q(z_t|z_{t−1}, a_{t−1}, s_t)`; the
//! decoder holds the latent transition `p(z_t|z_{t−1}, a_{t−1})` and the
//! state, environmental-reward and terminal human-return heads. Both
//! recurrent paths are LSTM-style cells followed by Gaussian MLP heads.
//! Tabular states are fed as one-hot vectors.

pub mod ablation;
pub mod neighbors;
pub mod train;

use ndarray::Array2;
use opehf_diff::{
    gauss_log_prob, gauss_sample_reparam, kl_diag_gauss, Bound, CellKind, DiagGaussianHead, GaussParams, Graph,
    ParameterSet, RecurrentCell, RecurrentState, Var,
};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablation::predict_human_return;
pub use neighbors::{latent_neighbors, median_bandwidth, neighbor_lists, sne_similarity, LatentEncoding};
pub use train::{train_vlmh, EpochLog, TrainingLog};

use crate::error::{Error, Result};
use crate::hmdp::{state_index, HmdpSpec, OfflineDataset, Trajectory};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VlmhConfig {
    pub latent_dim: usize,
    /// Hidden size of both recurrent cells.
    pub hidden_size: usize,
    /// Hidden layers of every Gaussian head.
    pub head_sizes: Vec<usize>,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every iteration.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub kl_weight: f64,
    /// Standardize human returns, environmental rewards and feature states.
    pub standardize: bool,
    pub validation_fraction: f64,
    /// Global gradient-norm ceiling per iteration.
    pub grad_clip: f64,
}

impl Default for VlmhConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden_size: 64,
            head_sizes: vec![128, 64],
            learning_rate: 1e-3,
            lr_decay: 0.997,
            epochs: 20,
            batch_size: 64,
            weight_decay: 1e-3,
            kl_weight: 1.0,
            standardize: true,
            validation_fraction: 0.1,
            grad_clip: 100.0,
        }
    }
}

impl VlmhConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.kl_weight, self.grad_clip, self.lr_decay];
        if self.latent_dim == 0
            || self.latent_dim > 64
            || self.hidden_size == 0
            || self.epochs == 0
            || self.batch_size == 0
            || positive.iter().any(|v| !(*v > 0.0))
            || self.head_sizes.contains(&0)
            || !(self.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&self.validation_fraction)
        {
            return Err(Error::Config(
                "vlmh: sizes and rates must be positive, latent_dim ≤ 64, validation_fraction in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Affine standardization `(x − mean) / std` per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column statistics of `rows`; near-constant columns keep unit scale.
    pub fn fit(rows: &[&[f64]], dim: usize) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r.iter()) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for j in 0..dim {
                var[j] += (r[j] - mean[j]).powi(2) / n;
            }
        }
        let std = var
            .iter()
            .map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, j: usize, x: f64) -> f64 {
        (x - self.mean[j]) / self.std[j]
    }

    pub fn invert(&self, j: usize, x: f64) -> f64 {
        x * self.std[j] + self.mean[j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scalers {
    pub state: Scaler,
    pub reward: Scaler,
    pub ret: Scaler,
}

/// Network layout; parameter ids index into the model's [`ParameterSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Width of the encoded state vector.
    pub state_dim: usize,
    pub num_states: Option<usize>,
    pub num_actions: usize,
    pub horizon: usize,
    pub latent_dim: usize,
    pub enc_init: DiagGaussianHead,
    pub enc_cell: RecurrentCell,
    pub enc_head: DiagGaussianHead,
    pub dec_cell: RecurrentCell,
    pub dec_trans: DiagGaussianHead,
    pub dec_state: DiagGaussianHead,
    pub dec_reward: DiagGaussianHead,
    pub dec_return: DiagGaussianHead,
}

#[derive(Debug, Clone)]
pub struct VlmhModel {
    pub config: VlmhConfig,
    pub arch: Architecture,
    pub scalers: Scalers,
    /// Raw initial states of the training data, sampled by the ablation.
    pub initial_states: Vec<Vec<f64>>,
    pub params: ParameterSet,
    pub trained: bool,
    pub log: Option<TrainingLog>,
}

/// Minibatch of equal-horizon trajectories in network units.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    /// `T + 1` blocks of `b × state_dim`.
    pub states: Vec<Array2<f64>>,
    /// `T` blocks of `b × A`.
    pub actions: Vec<Array2<f64>>,
    /// `T` blocks of `b × 1`.
    pub rewards: Vec<Array2<f64>>,
    pub returns: Array2<f64>,
}

impl SeqBatch {
    pub fn len(&self) -> usize {
        self.returns.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-trajectory ELBO and its parts, each `b × 1`.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    pub elbo: Var,
    pub log_return: Var,
    pub log_states: Var,
    pub log_rewards: Var,
    pub kl_initial: Var,
    pub kl_transition: Var,
}

/// Plain values of the ELBO parts, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboValue {
    pub elbo: f64,
    pub log_return: f64,
    pub log_states: f64,
    pub log_rewards: f64,
    pub kl_initial: f64,
    pub kl_transition: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// Propagate posterior means.
    Mean,
    /// Reparameterized samples.
    Sample,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: VlmhConfig,
    arch: Architecture,
    scalers: Scalers,
    initial_states: Vec<Vec<f64>>,
    trained: bool,
    log: Option<TrainingLog>,
    checkpoint: opehf_diff::Checkpoint,
}

fn mean_col(g: &Graph, v: Var) -> f64 {
    let x = g.value(v);
    x.sum() / x.len() as f64
}

fn standard_normal(g: &mut Graph, rows: usize, dim: usize) -> GaussParams {
    GaussParams {
        mean: g.leaf(Array2::zeros((rows, dim))),
        std: g.leaf(Array2::ones((rows, dim))),
    }
}

impl VlmhModel {
    /// Fresh model for datasets shaped like `ds`; scalers are fitted on `ds`.
    pub fn new(ds: &OfflineDataset, config: VlmhConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if ds.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let spec = &ds.spec;
        let num_actions = spec.num_actions()?;
        let num_states = spec.num_states();
        let state_dim = num_states.unwrap_or(spec.state_len());
        let l = config.latent_dim;
        let hs = config.hidden_size;
        let heads = config.head_sizes.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, "vlmh-init", 0));
        let mut ps = ParameterSet::new();
        let arch = Architecture {
            state_dim,
            num_states,
            num_actions,
            horizon: spec.horizon,
            latent_dim: l,
            enc_init: DiagGaussianHead::new(&mut ps, "enc_init", state_dim, &heads, l, &mut rng),
            enc_cell: RecurrentCell::new(
                &mut ps,
                "enc_cell",
                CellKind::LstmStyle,
                l + num_actions + state_dim,
                hs,
                &mut rng,
            ),
            enc_head: DiagGaussianHead::new(&mut ps, "enc_head", hs, &heads, l, &mut rng),
            dec_cell: RecurrentCell::new(&mut ps, "dec_cell", CellKind::LstmStyle, l + num_actions, hs, &mut rng),
            dec_trans: DiagGaussianHead::new(&mut ps, "dec_trans", hs, &heads, l, &mut rng),
            dec_state: DiagGaussianHead::new(&mut ps, "dec_state", l, &heads, state_dim, &mut rng),
            dec_reward: DiagGaussianHead::new(&mut ps, "dec_reward", l, &heads, 1, &mut rng),
            dec_return: DiagGaussianHead::new(&mut ps, "dec_return", l, &heads, 1, &mut rng),
        };
        let scalers = if config.standardize {
            let feature_rows: Vec<&[f64]> = ds
                .trajectories
                .iter()
                .flat_map(|t| t.states.iter().map(|s| s.as_slice()))
                .collect();
            let rewards: Vec<[f64; 1]> = ds
                .trajectories
                .iter()
                .flat_map(|t| t.env_rewards.iter().map(|r| [*r]))
                .collect();
            let returns: Vec<[f64; 1]> = ds.trajectories.iter().map(|t| [t.human_return]).collect();
            Scalers {
                state: if num_states.is_some() {
                    Scaler::identity(state_dim)
                } else {
                    Scaler::fit(&feature_rows, state_dim)
                },
                reward: Scaler::fit(&rewards.iter().map(|r| r.as_slice()).collect::<Vec<_>>(), 1),
                ret: Scaler::fit(&returns.iter().map(|r| r.as_slice()).collect::<Vec<_>>(), 1),
            }
        } else {
            Scalers {
                state: Scaler::identity(state_dim),
                reward: Scaler::identity(1),
                ret: Scaler::identity(1),
            }
        };
        Ok(Self {
            config,
            arch,
            scalers,
            initial_states: ds.trajectories.iter().map(|t| t.states[0].clone()).collect(),
            params: ps,
            trained: false,
            log: None,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn check_spec(&self, spec: &HmdpSpec) -> Result<()> {
        let state_dim = spec.num_states().unwrap_or(spec.state_len());
        if spec.horizon != self.arch.horizon
            || spec.num_states() != self.arch.num_states
            || state_dim != self.arch.state_dim
            || spec.num_actions()? != self.arch.num_actions
        {
            return Err(Error::DimensionMismatch("dataset does not match the model architecture".into()));
        }
        Ok(())
    }

    /// Network-unit state vector.
    pub fn encode_state(&self, s: &[f64]) -> Result<Vec<f64>> {
        match self.arch.num_states {
            Some(ns) => {
                let i = state_index(s)?;
                if i >= ns {
                    return Err(Error::DimensionMismatch(format!("state {i} outside {ns} states")));
                }
                let mut v = vec![0.0; ns];
                v[i] = 1.0;
                Ok(v)
            }
            None => {
                if s.len() != self.arch.state_dim {
                    return Err(Error::DimensionMismatch("state length".into()));
                }
                Ok(s.iter().enumerate().map(|(j, x)| self.scalers.state.apply(j, *x)).collect())
            }
        }
    }

    /// Raw state from the decoded network-unit mean: argmax for one-hot
    /// states, inverse standardization for features.
    pub fn decode_state(&self, v: &[f64]) -> Vec<f64> {
        match self.arch.num_states {
            Some(_) => {
                let mut best = 0;
                for (i, x) in v.iter().enumerate() {
                    if *x > v[best] {
                        best = i;
                    }
                }
                vec![best as f64]
            }
            None => v.iter().enumerate().map(|(j, x)| self.scalers.state.invert(j, *x)).collect(),
        }
    }

    pub fn batch(&self, trajs: &[&Trajectory]) -> Result<SeqBatch> {
        let b = trajs.len();
        let t_max = self.arch.horizon;
        let (sd, na) = (self.arch.state_dim, self.arch.num_actions);
        let mut states = vec![Array2::zeros((b, sd)); t_max + 1];
        let mut actions = vec![Array2::zeros((b, na)); t_max];
        let mut rewards = vec![Array2::zeros((b, 1)); t_max];
        let mut returns = Array2::zeros((b, 1));
        for (i, tr) in trajs.iter().enumerate() {
            if tr.horizon() != t_max {
                return Err(Error::LengthMismatch {
                    left: tr.horizon(),
                    right: t_max,
                });
            }
            for t in 0..=t_max {
                for (j, x) in self.encode_state(&tr.states[t])?.into_iter().enumerate() {
                    states[t][[i, j]] = x;
                }
            }
            for t in 0..t_max {
                let a = tr.actions[t].index()?;
                if a >= na {
                    return Err(Error::DimensionMismatch(format!("action {a} outside {na}")));
                }
                actions[t][[i, a]] = 1.0;
                rewards[t][[i, 0]] = self.scalers.reward.apply(0, tr.env_rewards[t]);
            }
            returns[[i, 0]] = self.scalers.ret.apply(0, tr.human_return);
        }
        Ok(SeqBatch {
            states,
            actions,
            rewards,
            returns,
        })
    }

    /// `T + 1` standard-normal blocks of `rows × L`.
    pub fn draw_noise<R: rand::Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Vec<Array2<f64>> {
        (0..=self.arch.horizon)
            .map(|_| Array2::from_shape_fn((rows, self.arch.latent_dim), |_| StandardNormal.sample(rng)))
            .collect()
    }

    /// Posterior step: `q(z_t | ·)` for `t ≥ 1`, with the encoder cell state.
    fn posterior_step(
        &self,
        g: &mut Graph,
        p: &Bound,
        z_prev: Var,
        a_prev: Var,
        x: Var,
        state: RecurrentState,
    ) -> (GaussParams, RecurrentState) {
        let inp = g.concat_cols(&[z_prev, a_prev, x]);
        let st = self.arch.enc_cell.step(g, p, inp, state);
        (self.arch.enc_head.forward(g, p, st.h), st)
    }

    fn prior_step(
        &self,
        g: &mut Graph,
        p: &Bound,
        z_prev: Var,
        a_prev: Var,
        state: RecurrentState,
    ) -> (GaussParams, RecurrentState) {
        let inp = g.concat_cols(&[z_prev, a_prev]);
        let st = self.arch.dec_cell.step(g, p, inp, state);
        (self.arch.dec_trans.forward(g, p, st.h), st)
    }

    /// Builds the per-trajectory ELBO on `g` with reparameterization noise
    /// `noise[t]` (`b × L`, `t = 0..=T`).
    pub fn elbo_terms(&self, g: &mut Graph, p: &Bound, batch: &SeqBatch, noise: &[Array2<f64>]) -> Result<ElboTerms> {
        let t_max = self.arch.horizon;
        let b = batch.len();
        let l = self.arch.latent_dim;
        if noise.len() != t_max + 1 || batch.states.len() != t_max + 1 {
            return Err(Error::LengthMismatch {
                left: noise.len(),
                right: t_max + 1,
            });
        }
        let xs: Vec<Var> = batch.states.iter().map(|x| g.leaf(x.clone())).collect();
        let acts: Vec<Var> = batch.actions.iter().map(|x| g.leaf(x.clone())).collect();
        let q0 = self.arch.enc_init.forward(g, p, xs[0]);
        let prior0 = standard_normal(g, b, l);
        let kl_initial = kl_diag_gauss(g, q0, prior0)?;
        let mut z = gauss_sample_reparam(g, q0, noise[0].clone())?;
        let ps0 = self.arch.dec_state.forward(g, p, z);
        let mut log_states = gauss_log_prob(g, ps0, xs[0])?;
        let mut log_rewards = g.leaf(Array2::zeros((b, 1)));
        let mut kl_transition = g.leaf(Array2::zeros((b, 1)));
        let mut enc_state = self.arch.enc_cell.zero_state(g, b);
        let mut dec_state = self.arch.dec_cell.zero_state(g, b);
        for t in 1..=t_max {
            let (q, es) = self.posterior_step(g, p, z, acts[t - 1], xs[t], enc_state);
            let (pr, ds) = self.prior_step(g, p, z, acts[t - 1], dec_state);
            enc_state = es;
            dec_state = ds;
            let kl = kl_diag_gauss(g, q, pr)?;
            kl_transition = g.add(kl_transition, kl);
            z = gauss_sample_reparam(g, q, noise[t].clone())?;
            let ps = self.arch.dec_state.forward(g, p, z);
            let lp = gauss_log_prob(g, ps, xs[t])?;
            log_states = g.add(log_states, lp);
            let pr_r = self.arch.dec_reward.forward(g, p, z);
            let r = g.leaf(batch.rewards[t - 1].clone());
            let lr = gauss_log_prob(g, pr_r, r)?;
            log_rewards = g.add(log_rewards, lr);
        }
        let pg = self.arch.dec_return.forward(g, p, z);
        let gv = g.leaf(batch.returns.clone());
        let log_return = gauss_log_prob(g, pg, gv)?;
        let kl = g.add(kl_initial, kl_transition);
        let kl = g.scale(kl, self.config.kl_weight);
        let ll = g.add(log_return, log_states);
        let ll = g.add(ll, log_rewards);
        let elbo = g.sub(ll, kl);
        for (name, v) in [
            ("human-return log-likelihood", log_return),
            ("state log-likelihood", log_states),
            ("reward log-likelihood", log_rewards),
            ("initial KL", kl_initial),
            ("transition KL", kl_transition),
        ] {
            if g.value(v).iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("ELBO term: {name}")));
            }
        }
        Ok(ElboTerms {
            elbo,
            log_return,
            log_states,
            log_rewards,
            kl_initial,
            kl_transition,
        })
    }

    /// Batch-mean ELBO parts under the given noise.
    pub fn elbo_value(&self, trajs: &[&Trajectory], noise: &[Array2<f64>]) -> Result<ElboValue> {
        let batch = self.batch(trajs)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let e = self.elbo_terms(&mut g, &p, &batch, noise)?;
        Ok(ElboValue {
            elbo: mean_col(&g, e.elbo),
            log_return: mean_col(&g, e.log_return),
            log_states: mean_col(&g, e.log_states),
            log_rewards: mean_col(&g, e.log_rewards),
            kl_initial: mean_col(&g, e.kl_initial),
            kl_transition: mean_col(&g, e.kl_transition),
        })
    }

    /// Single-trajectory ELBO with fresh reparameterization noise.
    pub fn elbo<R: rand::Rng + ?Sized>(&self, traj: &Trajectory, rng: &mut R) -> Result<ElboValue> {
        let noise = self.draw_noise(1, rng);
        self.elbo_value(&[traj], &noise)
    }

    /// Mean-ELBO of a dataset in chunks, with noise from `(seed, stage, chunk)`.
    pub fn dataset_elbo(&self, trajs: &[&Trajectory], seed: u64, stage: &str) -> Result<f64> {
        if trajs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let chunk = self.config.batch_size.max(1);
        let parts = trajs
            .par_chunks(chunk)
            .enumerate()
            .map(|(c, tr)| {
                let mut rng = crate::seed::stage_rng(seed, stage, c as u64);
                let noise = self.draw_noise(tr.len(), &mut rng);
                Ok(self.elbo_value(tr, &noise)?.elbo * tr.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(parts.iter().sum::<f64>() / trajs.len() as f64)
    }

    /// Posterior encodings `z_0..z_T` of a batch; `noise = None` propagates means.
    fn encode_batch(&self, trajs: &[&Trajectory], noise: Option<&[Array2<f64>]>) -> Result<Vec<Vec<Vec<f64>>>> {
        let batch = self.batch(trajs)?;
        let b = batch.len();
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let xs: Vec<Var> = batch.states.iter().map(|x| g.leaf(x.clone())).collect();
        let acts: Vec<Var> = batch.actions.iter().map(|x| g.leaf(x.clone())).collect();
        let q0 = self.arch.enc_init.forward(&mut g, &p, xs[0]);
        let pick = |g: &mut Graph, q: GaussParams, t: usize| -> Result<Var> {
            match noise {
                None => Ok(q.mean),
                Some(n) => Ok(gauss_sample_reparam(g, q, n[t].clone())?),
            }
        };
        let mut z = pick(&mut g, q0, 0)?;
        let mut zs = vec![z];
        let mut st = self.arch.enc_cell.zero_state(&mut g, b);
        for t in 1..=self.arch.horizon {
            let (q, s) = self.posterior_step(&mut g, &p, z, acts[t - 1], xs[t], st);
            st = s;
            z = pick(&mut g, q, t)?;
            zs.push(z);
        }
        Ok((0..b)
            .map(|i| zs.iter().map(|v| g.value(*v).row(i).to_vec()).collect())
            .collect())
    }

    /// `T + 1` latent vectors of one trajectory.
    pub fn encode_trajectory<R: rand::Rng + ?Sized>(
        &self,
        traj: &Trajectory,
        mode: EncodeMode,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        match mode {
            EncodeMode::Mean => Ok(self.encode_batch(&[traj], None)?.remove(0)),
            EncodeMode::Sample => {
                let noise = self.draw_noise(1, rng);
                Ok(self.encode_batch(&[traj], Some(&noise))?.remove(0))
            }
        }
    }

    /// Sample-mode encoding with explicit noise (`T + 1` blocks of `1 × L`).
    pub fn encode_with_noise(&self, traj: &Trajectory, noise: &[Array2<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.encode_batch(&[traj], Some(noise))?.remove(0))
    }

    /// Posterior-mean encodings of every step of every trajectory, in
    /// `(trajectory, step)` order.
    pub fn encode_dataset(&self, ds: &OfflineDataset) -> Result<Vec<LatentEncoding>> {
        self.check_spec(&ds.spec)?;
        let trajs: Vec<&Trajectory> = ds.trajectories.iter().collect();
        let chunk = self.config.batch_size.max(1);
        let blocks = trajs
            .par_chunks(chunk)
            .map(|c| self.encode_batch(c, None))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(ds.len() * (self.arch.horizon + 1));
        for (i, z) in blocks.into_iter().flatten().enumerate() {
            let g = ds.trajectories[i].human_return;
            for (t, mean) in z.into_iter().enumerate() {
                out.push(LatentEncoding {
                    trajectory: i,
                    step: t,
                    mean,
                    human_return: g,
                });
            }
        }
        Ok(out)
    }

    /// Zeroes the mean/std output layers of every head.
    pub fn zero_output_heads(&mut self) {
        for h in self.heads() {
            h.zero_output(&mut self.params);
        }
    }

    /// Pins every Gaussian head to `N(0, 1)` regardless of its input.
    pub fn pin_heads_standard_normal(&mut self) {
        for h in self.heads() {
            h.pin_output(&mut self.params, 0.0, 1.0);
        }
    }

    fn heads(&self) -> Vec<DiagGaussianHead> {
        vec![
            self.arch.enc_init.clone(),
            self.arch.enc_head.clone(),
            self.arch.dec_trans.clone(),
            self.arch.dec_state.clone(),
            self.arch.dec_reward.clone(),
            self.arch.dec_return.clone(),
        ]
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::io::save_json(
            &ModelFile {
                config: self.config.clone(),
                arch: self.arch.clone(),
                scalers: self.scalers.clone(),
                initial_states: self.initial_states.clone(),
                trained: self.trained,
                log: self.log.clone(),
                checkpoint: self.params.to_checkpoint(),
            },
            path,
        )
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f: ModelFile = crate::io::load_json(path)?;
        Ok(Self {
            config: f.config,
            arch: f.arch,
            scalers: f.scalers,
            initial_states: f.initial_states,
            params: ParameterSet::from_checkpoint(&f.checkpoint)?,
            trained: f.trained,
            log: f.log,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::hmdp::{Action, ActionSpace, StateSpace};

    pub(crate) fn tiny_dataset(n: usize, horizon: usize) -> OfflineDataset {
        let spec = HmdpSpec {
            state_space: StateSpace::Tabular { num_states: 2 },
            action_space: ActionSpace::Discrete { num_actions: 2 },
            discount: 0.9,
            horizon,
            env_id: "tiny".into(),
        };
        let trajectories = (0..n)
            .map(|i| Trajectory {
                states: (0..=horizon).map(|t| vec![((i + t) % 2) as f64]).collect(),
                actions: (0..horizon).map(|t| Action::Discrete((i * t) % 2)).collect(),
                env_rewards: (0..horizon).map(|t| (t % 2) as f64).collect(),
                human_return: i as f64 * 0.5,
                behavior_probs: Some(vec![0.5; horizon]),
                true_ihrs: None,
            })
            .collect();
        OfflineDataset::new(spec, trajectories, "tiny", 0).unwrap()
    }

    fn small_config() -> VlmhConfig {
        VlmhConfig {
            latent_dim: 3,
            hidden_size: 5,
            head_sizes: vec![6],
            ..Default::default()
        }
    }

    #[test]
    fn mean_encoding_is_deterministic_and_zero_noise_matches() {
        let ds = tiny_dataset(4, 3);
        let m = VlmhModel::new(&ds, small_config(), 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let a = m.encode_trajectory(&ds.trajectories[1], EncodeMode::Mean, &mut rng).unwrap();
        let b = m.encode_trajectory(&ds.trajectories[1], EncodeMode::Mean, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let zero: Vec<Array2<f64>> = (0..4).map(|_| Array2::zeros((1, 3))).collect();
        assert_eq!(m.encode_with_noise(&ds.trajectories[1], &zero).unwrap(), a);
    }

    #[test]
    fn zeroed_heads_give_zero_encodings() {
        let ds = tiny_dataset(3, 2);
        let mut m = VlmhModel::new(&ds, small_config(), 2).unwrap();
        m.zero_output_heads();
        for e in m.encode_dataset(&ds).unwrap() {
            assert!(e.mean.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn pinned_heads_have_zero_kl_and_analytic_elbo() {
        let mut ds = tiny_dataset(1, 1);
        ds.trajectories[0].human_return = 0.7;
        ds.trajectories[0].env_rewards = vec![-0.4];
        let cfg = VlmhConfig {
            standardize: false,
            ..small_config()
        };
        let mut m = VlmhModel::new(&ds, cfg, 3).unwrap();
        m.pin_heads_standard_normal();
        let zero: Vec<Array2<f64>> = (0..2).map(|_| Array2::zeros((1, 3))).collect();
        let v = m.elbo_value(&[&ds.trajectories[0]], &zero).unwrap();
        assert!(v.kl_initial.abs() < 1e-12);
        assert!(v.kl_transition.abs() < 1e-12);
        let lp = |x: f64| -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
        // state 0 at t = 0 and state 1 at t = 1, one-hot over two states
        let states = lp(1.0) + lp(0.0) + lp(0.0) + lp(1.0);
        let expect = lp(0.7) + states + lp(-0.4);
        assert!((v.elbo - expect).abs() < 1e-9, "{} vs {expect}", v.elbo);
    }

    #[test]
    fn save_load_round_trip() {
        let ds = tiny_dataset(3, 2);
        let m = VlmhModel::new(&ds, small_config(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = VlmhModel::load(&path).unwrap();
        assert_eq!(back.encode_dataset(&ds).unwrap(), m.encode_dataset(&ds).unwrap());
    }
}
