//! Off-policy estimators of the human return of a target policy.
//!
//! Every estimator consumes a dataset together with a per-step reward table
//! (reconstructed, baseline or oracle IHRs) aligned with its trajectories.

pub mod behavior;
pub mod bootstrap;
pub mod dice;
pub mod dr;
pub mod fqe;
pub mod variance;
pub mod weights;

use serde::{Deserialize, Serialize};

pub use behavior::{estimate_behavior_policy, BehaviorKind, BehaviorPolicyEstimate};
pub use bootstrap::{bootstrap_mean_se, bootstrap_se};
pub use dice::{dice, DiceConfig, DiceResult, RatioEstimate};
pub use dr::{dr, dr_terms, DrForm};
pub use fqe::{fqe, fqe_regression_loss, FqeConfig, FqeResult, QApprox};
pub use variance::{variance_study, VarianceStudy, VarianceStudyConfig};
pub use weights::{
    importance_weights, is_terms, is_vanilla, is_vanilla_rewards, pdis, pdis_terms, ImportanceWeights,
};

use crate::error::{Error, Result};
use crate::hmdp::{discounted_return, OfflineDataset};
use crate::policy::Policy;

/// Source of behavior probabilities for importance weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BehaviorModel {
    /// Probabilities recorded in the dataset.
    Logged,
    Known(Policy),
    Estimated(BehaviorPolicyEstimate),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Is,
    Pdis,
    Dr,
    Dice,
    Fqe,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Is,
        EstimatorKind::Pdis,
        EstimatorKind::Dr,
        EstimatorKind::Dice,
        EstimatorKind::Fqe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Is => "is",
            EstimatorKind::Pdis => "pdis",
            EstimatorKind::Dr => "dr",
            EstimatorKind::Dice => "dice",
            EstimatorKind::Fqe => "fqe",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Ceiling for cumulative importance weights; `None` disables clipping.
    pub clip: Option<f64>,
    /// Control-variate DR form; `false` evaluates the alternative printed form.
    pub standard_dr: bool,
    pub fqe: FqeConfig,
    pub dice: DiceConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            clip: None,
            standard_dr: true,
            fqe: FqeConfig::default(),
            dice: DiceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub ess: Option<f64>,
    pub max_weight: Option<f64>,
    pub bellman_residual: Option<f64>,
    pub coverage_violations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimator: EstimatorKind,
    pub method_tag: String,
    pub target_policy_id: String,
    pub estimate: f64,
    pub diagnostics: Diagnostics,
}

/// Estimate plus per-trajectory terms whose mean equals the estimate, when
/// the estimator decomposes that way (used for bootstrap errors).
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutput {
    pub estimate: f64,
    pub terms: Option<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

fn weight_diagnostics(w: &ImportanceWeights) -> Diagnostics {
    Diagnostics {
        ess: Some(w.ess()),
        max_weight: Some(w.max_weight()),
        ..Default::default()
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Runs one estimator on `rewards` (one row per trajectory).
pub fn estimate(
    kind: EstimatorKind,
    ds: &OfflineDataset,
    rewards: &[Vec<f64>],
    target: &Policy,
    behavior: &BehaviorModel,
    cfg: &EstimatorConfig,
) -> Result<EstimatorOutput> {
    let gamma = ds.spec.discount;
    match kind {
        EstimatorKind::Is => {
            let w = importance_weights(ds, target, behavior, cfg.clip)?;
            let returns = rewards
                .iter()
                .map(|r| discounted_return(r, gamma))
                .collect::<Result<Vec<_>>>()?;
            let terms = is_terms(&returns, &w)?;
            Ok(EstimatorOutput {
                estimate: mean(&terms),
                terms: Some(terms),
                diagnostics: weight_diagnostics(&w),
            })
        }
        EstimatorKind::Pdis => {
            let w = importance_weights(ds, target, behavior, cfg.clip)?;
            let terms = pdis_terms(rewards, gamma, &w)?;
            Ok(EstimatorOutput {
                estimate: mean(&terms),
                terms: Some(terms),
                diagnostics: weight_diagnostics(&w),
            })
        }
        EstimatorKind::Dr => {
            let w = importance_weights(ds, target, behavior, cfg.clip)?;
            let q = fqe(ds, rewards, target, &cfg.fqe)?;
            let form = if cfg.standard_dr {
                DrForm::Standard
            } else {
                DrForm::Verbatim
            };
            let terms = dr_terms(ds, rewards, target, &w, &q.q, form)?;
            let mut diagnostics = weight_diagnostics(&w);
            diagnostics.bellman_residual = Some(q.bellman_residual);
            Ok(EstimatorOutput {
                estimate: mean(&terms),
                terms: Some(terms),
                diagnostics,
            })
        }
        EstimatorKind::Fqe => {
            let q = fqe(ds, rewards, target, &cfg.fqe)?;
            Ok(EstimatorOutput {
                estimate: q.value,
                terms: None,
                diagnostics: Diagnostics {
                    bellman_residual: Some(q.bellman_residual),
                    ..Default::default()
                },
            })
        }
        EstimatorKind::Dice => {
            let d = dice(ds, rewards, target, &cfg.dice)?;
            Ok(EstimatorOutput {
                estimate: d.estimate,
                terms: None,
                diagnostics: Diagnostics {
                    coverage_violations: Some(d.ratios.coverage_violations),
                    ..Default::default()
                },
            })
        }
    }
}

pub fn run_estimator(
    kind: EstimatorKind,
    ds: &OfflineDataset,
    rewards: &[Vec<f64>],
    target: &Policy,
    target_policy_id: &str,
    method_tag: &str,
    behavior: &BehaviorModel,
    cfg: &EstimatorConfig,
) -> Result<EstimateRecord> {
    let out = estimate(kind, ds, rewards, target, behavior, cfg)?;
    if !out.estimate.is_finite() {
        return Err(Error::NonFinite(format!("{} estimate", kind.name())));
    }
    Ok(EstimateRecord {
        estimator: kind,
        method_tag: method_tag.to_string(),
        target_policy_id: target_policy_id.to_string(),
        estimate: out.estimate,
        diagnostics: out.diagnostics,
    })
}

/// Bootstrap standard error of any estimator: each replicate re-runs it on a
/// resampled dataset.
pub fn estimator_bootstrap_se(
    kind: EstimatorKind,
    ds: &OfflineDataset,
    rewards: &[Vec<f64>],
    target: &Policy,
    behavior: &BehaviorModel,
    cfg: &EstimatorConfig,
    reps: usize,
    seed: u64,
) -> Result<f64> {
    bootstrap_se(ds.len(), reps, seed, |idx| {
        let sub = ds.subset(idx);
        let r: Vec<Vec<f64>> = idx.iter().map(|&i| rewards[i].clone()).collect();
        Ok(estimate(kind, &sub, &r, target, behavior, cfg)?.estimate)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimator_names_round_trip() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.name().parse::<EstimatorKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("wis".parse::<EstimatorKind>().is_err());
    }

    #[test]
    fn record_json_shape() {
        let r = EstimateRecord {
            estimator: EstimatorKind::Pdis,
            method_tag: "rilr".into(),
            target_policy_id: "eps-0.1".into(),
            estimate: 1.5,
            diagnostics: Diagnostics {
                ess: Some(10.0),
                ..Default::default()
            },
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["estimator"], "pdis");
        assert_eq!(v["diagnostics"]["ess"], 10.0);
        assert!(v["diagnostics"]["bellman_residual"].is_null());
    }
}
