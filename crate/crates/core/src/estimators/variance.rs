//! Monte Carlo comparison of per-decision IS on per-step human rewards with
//! vanilla IS on whole returns, plus an audit of the positive-correlation
//! condition between `ω_{0:k}` and `r_t ω_{0:k}`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::weights::{importance_weights, is_vanilla, pdis};
use super::BehaviorModel;
use crate::envs::{exact_policy_human_value, generate_dataset, Env};
use crate::error::{Error, Result};
use crate::metrics::{mean_se, pearson, sample_variance};
use crate::policy::{markov_mixture, Policy};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceStudyConfig {
    /// Number of independent datasets `M`.
    pub replicas: usize,
    /// Trajectories per dataset `N`.
    pub per_dataset: usize,
    /// Trajectories in the correlation-audit dataset.
    pub audit_trajectories: usize,
    pub seed: u64,
}

impl Default for VarianceStudyConfig {
    fn default() -> Self {
        Self {
            replicas: 500,
            per_dataset: 200,
            audit_trajectories: 20_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationAudit {
    /// Smallest `corr(ω_{0:k}, r_t ω_{0:k})` over `0 ≤ t < k ≤ T−1`.
    pub min_correlation: f64,
    pub mean_correlation: f64,
    pub all_positive: bool,
    /// Pairs whose weights were constant and so carry no correlation.
    pub skipped_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceStudy {
    pub true_value: f64,
    pub var_pdis: f64,
    pub var_is: f64,
    pub mean_pdis: f64,
    pub se_pdis: f64,
    pub mean_is: f64,
    pub se_is: f64,
    pub audit: CorrelationAudit,
}

/// `(1−δ)·β + δ·greedy` over tabular states and its largest per-state total
/// variation distance from `β`.
pub fn near_behavior_target(env: &Env, behavior: &Policy, delta: f64) -> Result<(Policy, f64)> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::InvalidArgument("mixing weight must lie in [0, 1]".into()));
    }
    let model = env.model();
    let greedy = Policy::DeterministicMap {
        map: model.greedy_stationary(true),
        num_actions: model.num_actions,
    };
    let target = markov_mixture(&[(1.0 - delta, behavior), (delta, &greedy)], model.num_states)?;
    Ok((target.clone(), max_tv(env, behavior, &target)?))
}

/// Largest per-state total variation distance between two policies.
pub fn max_tv(env: &Env, a: &Policy, b: &Policy) -> Result<f64> {
    let pa = env.policy_table(a)?;
    let pb = env.policy_table(b)?;
    Ok(pa
        .iter()
        .zip(&pb)
        .map(|(x, y)| 0.5 * x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .fold(0.0, f64::max))
}

fn audit(env: &Env, behavior: &Policy, target: &Policy, cfg: &VarianceStudyConfig) -> Result<CorrelationAudit> {
    let ds = generate_dataset(
        env,
        behavior,
        cfg.audit_trajectories.max(2),
        derive_seed(cfg.seed, "variance-audit", 0),
        "variance-audit",
    )?;
    let w = importance_weights(&ds, target, &BehaviorModel::Logged, None)?;
    let ihrs = ds.true_ihrs()?;
    let horizon = ds.spec.horizon;
    let mut corrs = Vec::new();
    let mut skipped = 0;
    for k in 1..horizon {
        let wk: Vec<f64> = w.cumulative.iter().map(|c| c[k]).collect();
        for t in 0..k {
            let rw: Vec<f64> = wk.iter().zip(&ihrs).map(|(w, r)| w * r[t]).collect();
            match pearson(&wk, &rw) {
                Ok(c) => corrs.push(c),
                Err(Error::ConstantInput) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    // With π = β every weight is 1 and no pair is informative.
    if corrs.is_empty() {
        return Ok(CorrelationAudit {
            min_correlation: f64::NAN,
            mean_correlation: f64::NAN,
            all_positive: false,
            skipped_pairs: skipped,
        });
    }
    let min_correlation = corrs.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(CorrelationAudit {
        min_correlation,
        mean_correlation: corrs.iter().sum::<f64>() / corrs.len() as f64,
        all_positive: min_correlation > 0.0,
        skipped_pairs: skipped,
    })
}

/// Draws `M` datasets of `N` behavior trajectories and records PDIS on the
/// true IHRs and vanilla IS on the human returns, both with logged
/// behavior probabilities.
pub fn variance_study(
    env: &Env,
    behavior: &Policy,
    target: &Policy,
    cfg: &VarianceStudyConfig,
) -> Result<VarianceStudy> {
    if cfg.replicas < 2 || cfg.per_dataset == 0 {
        return Err(Error::InvalidArgument("need at least 2 replicas of non-empty datasets".into()));
    }
    let pairs = (0..cfg.replicas)
        .into_par_iter()
        .map(|m| {
            let ds = generate_dataset(
                env,
                behavior,
                cfg.per_dataset,
                derive_seed(cfg.seed, "variance-replica", m as u64),
                "variance-replica",
            )?;
            let w = importance_weights(&ds, target, &BehaviorModel::Logged, None)?;
            let p = pdis(&ds.true_ihrs()?, ds.spec.discount, &w)?;
            let v = is_vanilla(&ds.human_returns(), &w)?;
            Ok((p, v))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
    let v: Vec<f64> = pairs.iter().map(|x| x.1).collect();
    let (mean_pdis, se_pdis) = mean_se(&p);
    let (mean_is, se_is) = mean_se(&v);
    Ok(VarianceStudy {
        true_value: exact_policy_human_value(env, target)?,
        var_pdis: sample_variance(&p),
        var_is: sample_variance(&v),
        mean_pdis,
        se_pdis,
        mean_is,
        se_is,
        audit: audit(env, behavior, target, cfg)?,
    })
}
