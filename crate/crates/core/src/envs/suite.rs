//! Benchmark problems: an environment, a sub-optimal behavior mixture and a
//! spread of target policies with exact human values.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{exact_policy_human_value, ConfounderConfig, Env, LatentConfounderEnv, TabularHmdp};
use crate::error::{Error, Result};
use crate::metrics::pearson;
use crate::policy::{markov_mixture, Policy};
use crate::seed::stage_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvConfig {
    RandomTabular {
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        discount: f64,
        #[serde(default = "default_ihr_scale")]
        ihr_scale: f64,
        #[serde(default = "default_ihr_noise")]
        ihr_noise: f64,
    },
    Confounder(ConfounderConfig),
    ConstantIhr {
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        discount: f64,
        value: f64,
    },
}

fn default_ihr_scale() -> f64 {
    4.0
}

fn default_ihr_noise() -> f64 {
    0.25
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::RandomTabular { .. } => "random-tabular",
            EnvConfig::Confounder(_) => "confounder",
            EnvConfig::ConstantIhr { .. } => "constant-ihr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// ε values of the ε-greedy targets around the optimal policy.
    pub epsilons: Vec<f64>,
    /// Add the deterministic worst-case policy to the targets.
    pub include_worst: bool,
    /// Behavior value must not exceed this fraction of the best target value.
    pub behavior_value_ratio: f64,
    /// Maximum |Pearson| between env and human returns accepted for
    /// uncorrelated confounder instances.
    pub max_abs_correlation: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.0, 0.1, 0.25, 0.5, 0.75, 1.0],
            include_worst: true,
            behavior_value_ratio: 0.6,
            max_abs_correlation: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPolicy {
    pub id: String,
    pub policy: Policy,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkProblem {
    pub name: String,
    pub env: Env,
    pub behavior: Policy,
    pub behavior_components: Vec<(f64, Policy)>,
    pub behavior_value: f64,
    pub targets: Vec<TargetPolicy>,
}

impl BenchmarkProblem {
    pub fn target_values(&self) -> Vec<f64> {
        self.targets.iter().map(|t| t.value).collect()
    }
}

/// Softmax over `[φ(s), 1]` whose logits fit `ln p(a|s)` by least squares.
fn featurize(table: &[Vec<f64>], features: &[Vec<f64>]) -> Result<Policy> {
    let ns = features.len();
    let d = features[0].len() + 1;
    let na = table[0].len();
    let x = DMatrix::from_fn(ns, d, |s, j| if j + 1 == d { 1.0 } else { features[s][j] });
    let xtx = x.transpose() * &x + DMatrix::<f64>::identity(d, d) * 1e-8;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("singular feature matrix".into()))?;
    let mut weights = Vec::with_capacity(na);
    for a in 0..na {
        let y = DVector::from_fn(ns, |s, _| table[s][a].max(1e-4).ln());
        let w = chol.solve(&(x.transpose() * y));
        weights.push(w.iter().copied().collect());
    }
    Ok(Policy::FeaturizedSoftmax {
        weights,
        temperature: 1.0,
    })
}

fn emit_policy(env: &Env, tabular: Policy) -> Result<Policy> {
    match env {
        Env::Confounder(e) if e.emit_features => {
            let idx: Vec<Vec<f64>> = (0..e.num_states).map(|s| vec![s as f64]).collect();
            featurize(&tabular.prob_table(&idx)?, &e.features)
        }
        _ => Ok(tabular),
    }
}

fn instantiate<R: Rng + ?Sized>(cfg: &EnvConfig, id: &str, rng: &mut R) -> Result<Env> {
    Ok(match cfg {
        EnvConfig::RandomTabular {
            num_states,
            num_actions,
            horizon,
            discount,
            ihr_scale,
            ihr_noise,
        } => Env::Tabular(TabularHmdp::random(
            *num_states,
            *num_actions,
            *horizon,
            *discount,
            *ihr_scale,
            *ihr_noise,
            id,
            rng,
        )?),
        EnvConfig::Confounder(c) => Env::Confounder(LatentConfounderEnv::generate(c, id, rng)?),
        EnvConfig::ConstantIhr {
            num_states,
            num_actions,
            horizon,
            discount,
            value,
        } => Env::Tabular(TabularHmdp::constant_ihr(
            *num_states,
            *num_actions,
            *horizon,
            *discount,
            *value,
            id,
            rng,
        )?),
    })
}

fn eps_id(e: f64) -> String {
    format!("eps-{e}")
}

/// Builds one problem. Instances are drawn from `(env_seed, "env-instance",
/// attempt)` until the behavior mixture satisfies the value-ratio condition
/// (and, for uncorrelated confounders, the correlation condition).
pub fn build_problem(
    cfg: &EnvConfig,
    policies: &PolicyConfig,
    env_seed: u64,
    name: &str,
) -> Result<BenchmarkProblem> {
    if policies.epsilons.is_empty() {
        return Err(Error::Config("at least one target epsilon is required".into()));
    }
    for attempt in 0..200u64 {
        let mut rng = stage_rng(env_seed, "env-instance", attempt);
        let env = instantiate(cfg, name, &mut rng)?;
        let model = env.model();
        let greedy = model.greedy_stationary(true);
        let worst = model.greedy_stationary(false);
        let na = model.num_actions;

        let mut targets = Vec::new();
        for &e in &policies.epsilons {
            let p = emit_policy(&env, Policy::epsilon_greedy(&greedy, na, e)?)?;
            let value = exact_policy_human_value(&env, &p)?;
            targets.push(TargetPolicy {
                id: eps_id(e),
                policy: p,
                value,
            });
        }
        let worst_policy = Policy::DeterministicMap {
            map: worst.clone(),
            num_actions: na,
        };
        if policies.include_worst {
            let p = emit_policy(&env, worst_policy.clone())?;
            let value = exact_policy_human_value(&env, &p)?;
            targets.push(TargetPolicy {
                id: "worst".into(),
                policy: p,
                value,
            });
        }
        let max_target = targets.iter().map(|t| t.value).fold(f64::NEG_INFINITY, f64::max);

        let random_map = Policy::DeterministicMap {
            map: (0..model.num_states).map(|_| rng.random_range(0..na)).collect(),
            num_actions: na,
        };
        let uniform = Policy::UniformRandom { num_actions: na };
        let constant = matches!(cfg, EnvConfig::ConstantIhr { .. });
        let mut chosen = None;
        for step in 0..=19 {
            let w = if constant { 0.5 } else { step as f64 * 0.05 };
            let rest = 0.5 * (1.0 - w);
            let components = vec![(w, worst_policy.clone()), (rest, random_map.clone()), (rest, uniform.clone())];
            let refs: Vec<(f64, &Policy)> = components.iter().map(|(w, p)| (*w, p)).collect();
            let mix = emit_policy(&env, markov_mixture(&refs, model.num_states)?)?;
            let value = exact_policy_human_value(&env, &mix)?;
            if constant || value <= policies.behavior_value_ratio * max_target {
                chosen = Some((mix, components, value));
                break;
            }
        }
        let Some((behavior, components, behavior_value)) = chosen else {
            continue;
        };

        if let (Env::Confounder(e), EnvConfig::Confounder(c)) = (&env, cfg) {
            if c.correlation_knob == 0.0 {
                let mut rng = stage_rng(env_seed, "correlation-check", attempt);
                let mut env_ret = Vec::with_capacity(2000);
                let mut hum_ret = Vec::with_capacity(2000);
                for _ in 0..2000 {
                    let t = e.sample_episode(&behavior, &mut rng)?;
                    env_ret.push(crate::hmdp::discounted_return(&t.env_rewards, e.discount)?);
                    hum_ret.push(t.human_return);
                }
                if pearson(&env_ret, &hum_ret)?.abs() > policies.max_abs_correlation {
                    continue;
                }
            }
        }

        return Ok(BenchmarkProblem {
            name: name.to_string(),
            env,
            behavior,
            behavior_components: components,
            behavior_value,
            targets,
        });
    }
    Err(Error::Config(format!(
        "no instance of {} satisfied the behavior constraints",
        cfg.name()
    )))
}

/// Two random tabular problems and one uncorrelated latent-confounder problem.
pub fn make_benchmark_suite(seed: u64) -> Result<Vec<BenchmarkProblem>> {
    let policies = PolicyConfig::default();
    let specs = [
        (
            "tabular-a",
            EnvConfig::RandomTabular {
                num_states: 5,
                num_actions: 3,
                horizon: 8,
                discount: 0.9,
                ihr_scale: 4.0,
                ihr_noise: 0.25,
            },
        ),
        (
            "tabular-b",
            EnvConfig::RandomTabular {
                num_states: 8,
                num_actions: 2,
                horizon: 10,
                discount: 0.95,
                ihr_scale: 4.0,
                ihr_noise: 0.25,
            },
        ),
        ("confounder", EnvConfig::Confounder(ConfounderConfig::default())),
    ];
    specs
        .iter()
        .enumerate()
        .map(|(i, (name, cfg))| {
            build_problem(cfg, &policies, crate::seed::derive_seed(seed, name, i as u64), name)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_from_toml() {
        let cfg: EnvConfig = toml::from_str(
            "kind = \"confounder\"\nnum_states = 5\ncorrelation_knob = 1.0\n",
        )
        .unwrap();
        match cfg {
            EnvConfig::Confounder(c) => {
                assert_eq!(c.num_states, 5);
                assert_eq!(c.correlation_knob, 1.0);
                assert_eq!(c.num_actions, ConfounderConfig::default().num_actions);
            }
            other => panic!("{other:?}"),
        }
        assert!(toml::from_str::<EnvConfig>("kind = \"confounder\"\nnum_statez = 5\n").is_err());
    }

    #[test]
    fn featurized_targets_in_feature_mode() {
        let cfg = EnvConfig::Confounder(ConfounderConfig {
            emit_features: true,
            num_states: 5,
            ..Default::default()
        });
        let p = build_problem(&cfg, &PolicyConfig::default(), 3, "feat").unwrap();
        assert!(p
            .targets
            .iter()
            .all(|t| matches!(t.policy, Policy::FeaturizedSoftmax { .. })));
        assert!(p.env.spec().state_len() == 6);
    }
}
