//! Per-step human reward reconstruction: the latent-regularized recurrent
//! reconstructor and the rescale/fusion baselines.

pub mod model;
pub mod train;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use opehf_diff::CellKind;
use serde::{Deserialize, Serialize};

pub use model::{regularizer_term, rilr_loss, NeighborTargets, Reconstructor, RilrBatch, RilrLoss};
pub use train::{build_neighbor_targets, train_rilr, train_rilr_with_targets, RilrTrainLog};

use crate::error::{Error, Result};
use crate::hmdp::{discounted_return, OfflineDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconstructionMethod {
    Rilr,
    Rescale,
    Fusion,
    /// True IHRs exposed by a simulator; validates estimators on their own.
    OracleIhr,
}

impl ReconstructionMethod {
    pub const ALL: [ReconstructionMethod; 4] = [
        ReconstructionMethod::Rilr,
        ReconstructionMethod::Rescale,
        ReconstructionMethod::Fusion,
        ReconstructionMethod::OracleIhr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReconstructionMethod::Rilr => "rilr",
            ReconstructionMethod::Rescale => "rescale",
            ReconstructionMethod::Fusion => "fusion",
            ReconstructionMethod::OracleIhr => "oracle-ihr",
        }
    }
}

impl std::str::FromStr for ReconstructionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown reconstruction method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RilrConfig {
    /// Weight `C` of the latent-neighbor regularizer.
    pub regularizer_weight: f64,
    /// Neighbors `K` per step.
    pub neighbors: usize,
    /// Std of the discounted-sum likelihood; `None` uses
    /// `max(0.1·std(G), 0.01·(1 + |mean(G)|))`.
    pub sigma_sum: Option<f64>,
    /// Std of the regularizer likelihood; `None` uses the per-step return
    /// scale `u · max(std(G), 0.01·(1 + |mean(G)|))`, `u = (1−γ)/(1−γ^T)`.
    pub sigma_reg: Option<f64>,
    /// Use `u·G` as the neighbor target; `false` uses `(1−γ)·G`, which
    /// undershoots a constant per-step reward by the factor `1−γ^T`.
    pub finite_horizon_target: bool,
    /// Gating of the bidirectional reconstructor.
    pub cell: CellKind,
    pub hidden_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for RilrConfig {
    fn default() -> Self {
        Self {
            regularizer_weight: 0.05,
            neighbors: 5,
            sigma_sum: None,
            sigma_reg: None,
            finite_horizon_target: true,
            cell: CellKind::LstmStyle,
            hidden_size: 32,
            learning_rate: 3e-3,
            lr_decay: 0.999,
            epochs: 30,
            batch_size: 64,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl RilrConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_sigma = |s: Option<f64>| s.is_none_or(|v| v > 0.0);
        if !(self.regularizer_weight >= 0.0)
            || self.neighbors == 0
            || !positive_sigma(self.sigma_sum)
            || !positive_sigma(self.sigma_reg)
            || self.hidden_size == 0
            || !(self.learning_rate > 0.0)
            || !(self.lr_decay > 0.0)
            || self.epochs == 0
            || self.batch_size == 0
            || !(0.0..1.0).contains(&self.validation_fraction)
        {
            return Err(Error::Config(
                "rilr: C ≥ 0, K ≥ 1, variances and rates > 0, validation_fraction in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// A dataset whose per-step rewards are replaced by reconstructed IHRs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedDataset {
    pub base: OfflineDataset,
    pub ihrs: Vec<Vec<f64>>,
    pub method: ReconstructionMethod,
    /// `|Σ_t γ^t r̂_t − G^H|` per trajectory.
    pub sum_residuals: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SidecarLine {
    ihrs: Vec<f64>,
    sum_residual: f64,
    method: ReconstructionMethod,
}

impl ReconstructedDataset {
    pub fn new(base: OfflineDataset, ihrs: Vec<Vec<f64>>, method: ReconstructionMethod) -> Result<Self> {
        if ihrs.len() != base.len() {
            return Err(Error::LengthMismatch {
                left: ihrs.len(),
                right: base.len(),
            });
        }
        let mut sum_residuals = Vec::with_capacity(ihrs.len());
        for (t, r) in base.trajectories.iter().zip(&ihrs) {
            if r.len() != t.horizon() {
                return Err(Error::LengthMismatch {
                    left: r.len(),
                    right: t.horizon(),
                });
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("reconstructed IHRs".into()));
            }
            sum_residuals.push((discounted_return(r, base.spec.discount)? - t.human_return).abs());
        }
        Ok(Self {
            base,
            ihrs,
            method,
            sum_residuals,
        })
    }

    /// `|Σγ^t r̂_t − G^H| / (1 + |G^H|)` per trajectory.
    pub fn normalized_residuals(&self) -> Vec<f64> {
        self.sum_residuals
            .iter()
            .zip(&self.base.trajectories)
            .map(|(r, t)| r / (1.0 + t.human_return.abs()))
            .collect()
    }

    pub fn median_normalized_residual(&self) -> f64 {
        let mut r = self.normalized_residuals();
        r.sort_by(f64::total_cmp);
        let n = r.len();
        if n == 0 {
            return f64::NAN;
        }
        if n % 2 == 1 {
            r[n / 2]
        } else {
            0.5 * (r[n / 2 - 1] + r[n / 2])
        }
    }

    /// Writes the JSON-lines sidecar, one trajectory per line.
    pub fn write_sidecar(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for (ihrs, res) in self.ihrs.iter().zip(&self.sum_residuals) {
            serde_json::to_writer(
                &mut w,
                &SidecarLine {
                    ihrs: ihrs.clone(),
                    sum_residual: *res,
                    method: self.method,
                },
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Pairs a base dataset with a sidecar written by [`Self::write_sidecar`].
    pub fn read_sidecar(base: OfflineDataset, path: impl AsRef<Path>) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut ihrs = Vec::new();
        let mut method = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SidecarLine = serde_json::from_str(&line).map_err(|e| Error::Load {
                line: i,
                msg: e.to_string(),
            })?;
            if method.is_some_and(|m| m != rec.method) {
                return Err(Error::Load {
                    line: i,
                    msg: "mixed reconstruction methods".into(),
                });
            }
            method = Some(rec.method);
            ihrs.push(rec.ihrs);
        }
        let method = method.ok_or(Error::EmptySequence)?;
        Self::new(base, ihrs, method)
    }
}

fn last_step_scale(ds: &OfflineDataset) -> Result<f64> {
    let g = ds.spec.discount.powi(ds.spec.horizon as i32 - 1);
    if g < 1e-12 {
        return Err(Error::Underflow(g));
    }
    Ok(g)
}

/// All of `G^H` at the last step: `r̂_{T−1} = G^H / γ^{T−1}`, zeros before.
pub fn rescale_reconstruct(ds: &OfflineDataset) -> Result<ReconstructedDataset> {
    let g = last_step_scale(ds)?;
    let ihrs = ds
        .trajectories
        .iter()
        .map(|t| {
            let mut r = vec![0.0; t.horizon()];
            r[t.horizon() - 1] = t.human_return / g;
            r
        })
        .collect();
    ReconstructedDataset::new(ds.clone(), ihrs, ReconstructionMethod::Rescale)
}

/// Environmental rewards with the last step corrected so the discounted sum
/// equals `G^H`.
pub fn fusion_reconstruct(ds: &OfflineDataset) -> Result<ReconstructedDataset> {
    let g = last_step_scale(ds)?;
    let ihrs = ds
        .trajectories
        .iter()
        .map(|t| {
            let env = discounted_return(&t.env_rewards, ds.spec.discount)?;
            let mut r = t.env_rewards.clone();
            let last = r.len() - 1;
            r[last] += (t.human_return - env) / g;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    ReconstructedDataset::new(ds.clone(), ihrs, ReconstructionMethod::Fusion)
}

/// The simulator's true IHRs.
pub fn oracle_reconstruct(ds: &OfflineDataset) -> Result<ReconstructedDataset> {
    ReconstructedDataset::new(ds.clone(), ds.true_ihrs()?, ReconstructionMethod::OracleIhr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmdp::{Action, ActionSpace, HmdpSpec, StateSpace, Trajectory};
    use proptest::prelude::*;

    fn ds(discount: f64, rewards: Vec<Vec<f64>>, returns: Vec<f64>) -> OfflineDataset {
        let horizon = rewards[0].len();
        let spec = HmdpSpec {
            state_space: StateSpace::Tabular { num_states: 1 },
            action_space: ActionSpace::Discrete { num_actions: 1 },
            discount,
            horizon,
            env_id: "r".into(),
        };
        let trajectories = rewards
            .into_iter()
            .zip(returns)
            .map(|(r, g)| Trajectory {
                states: vec![vec![0.0]; horizon + 1],
                actions: vec![Action::Discrete(0); horizon],
                env_rewards: r,
                human_return: g,
                behavior_probs: None,
                true_ihrs: None,
            })
            .collect();
        OfflineDataset::new(spec, trajectories, "r", 0).unwrap()
    }

    #[test]
    fn rescale_examples() {
        let r = rescale_reconstruct(&ds(0.5, vec![vec![0.0; 3]], vec![1.75])).unwrap();
        assert_eq!(r.ihrs[0], vec![0.0, 0.0, 7.0]);
        let r = rescale_reconstruct(&ds(0.99, vec![vec![0.0]], vec![5.0])).unwrap();
        assert_eq!(r.ihrs[0], vec![5.0]);
    }

    #[test]
    fn fusion_examples() {
        let r = fusion_reconstruct(&ds(0.99, vec![vec![1.0, 0.0, 1.0]], vec![5.0])).unwrap();
        let last = 1.0 + (5.0 - 1.9801) / 0.9801;
        assert!((r.ihrs[0][2] - last).abs() < 1e-12);
        assert!((r.ihrs[0][2] - 4.0811).abs() < 1e-3);
        assert_eq!(&r.ihrs[0][..2], &[1.0, 0.0]);
        let g = discounted_return(&[0.3, 0.2], 0.9).unwrap();
        let r = fusion_reconstruct(&ds(0.9, vec![vec![0.3, 0.2]], vec![g])).unwrap();
        assert_eq!(r.ihrs[0], vec![0.3, 0.2]);
    }

    #[test]
    fn underflow_guard() {
        let d = ds(0.01, vec![vec![0.0; 8]], vec![1.0]);
        assert!(matches!(rescale_reconstruct(&d), Err(Error::Underflow(_))));
        assert!(matches!(fusion_reconstruct(&d), Err(Error::Underflow(_))));
    }

    #[test]
    fn sidecar_round_trip() {
        let d = ds(0.9, vec![vec![1.0, 2.0], vec![0.5, 0.1]], vec![3.0, -1.0]);
        let r = fusion_reconstruct(&d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rec.jsonl");
        r.write_sidecar(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["method"], "fusion");
        assert!(first["sum_residual"].is_number());
        let back = ReconstructedDataset::read_sidecar(d, &p).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn baselines_preserve_discounted_sum(
            discount in 0.5f64..0.99,
            rows in prop::collection::vec((prop::collection::vec(-3.0f64..3.0, 6), -20.0f64..20.0), 1..8),
        ) {
            let (rewards, returns): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
            let d = ds(discount, rewards, returns);
            for r in [rescale_reconstruct(&d).unwrap(), fusion_reconstruct(&d).unwrap()] {
                prop_assert!(r.sum_residuals.iter().all(|x| *x <= 1e-9));
            }
        }
    }
}
