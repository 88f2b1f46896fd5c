//! Stochastic and deterministic policies over discrete actions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmdp::{state_index, Action};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Policy {
    /// `π(a|s) ∝ exp(logits[s][a] / temperature)`.
    TabularSoftmax {
        logits: Vec<Vec<f64>>,
        temperature: f64,
    },
    /// `π(a|s) ∝ exp(weights[a] · [s, 1] / temperature)`.
    FeaturizedSoftmax {
        weights: Vec<Vec<f64>>,
        temperature: f64,
    },
    DeterministicMap { map: Vec<usize>, num_actions: usize },
    UniformRandom { num_actions: usize },
}

fn softmax(logits: impl Iterator<Item = f64>, temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.map(|l| l / temperature).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Policy {
    pub fn num_actions(&self) -> usize {
        match self {
            Policy::TabularSoftmax { logits, .. } => logits.first().map_or(0, Vec::len),
            Policy::FeaturizedSoftmax { weights, .. } => weights.len(),
            Policy::DeterministicMap { num_actions, .. } => *num_actions,
            Policy::UniformRandom { num_actions } => *num_actions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match self {
            Policy::TabularSoftmax {
                logits,
                temperature,
            } => {
                if !(*temperature > 0.0) {
                    return bad("temperature must be positive");
                }
                let a = self.num_actions();
                if logits.is_empty() || a == 0 || logits.iter().any(|r| r.len() != a) {
                    return bad("ragged or empty logits table");
                }
                if logits.iter().flatten().any(|l| !l.is_finite()) {
                    return bad("non-finite logit");
                }
            }
            Policy::FeaturizedSoftmax {
                weights,
                temperature,
            } => {
                if !(*temperature > 0.0) {
                    return bad("temperature must be positive");
                }
                let d = weights.first().map_or(0, Vec::len);
                if weights.is_empty() || d < 1 || weights.iter().any(|r| r.len() != d) {
                    return bad("ragged or empty weight matrix");
                }
            }
            Policy::DeterministicMap { map, num_actions } => {
                if map.iter().any(|a| a >= num_actions) {
                    return bad("mapped action out of range");
                }
            }
            Policy::UniformRandom { num_actions } => {
                if *num_actions == 0 {
                    return bad("no actions");
                }
            }
        }
        Ok(())
    }

    /// Full action distribution at `state`.
    pub fn action_probs(&self, state: &[f64]) -> Result<Vec<f64>> {
        match self {
            Policy::TabularSoftmax {
                logits,
                temperature,
            } => {
                let s = state_index(state)?;
                let row = logits.get(s).ok_or_else(|| {
                    Error::DimensionMismatch(format!("state {s} outside logits table"))
                })?;
                Ok(softmax(row.iter().copied(), *temperature))
            }
            Policy::FeaturizedSoftmax {
                weights,
                temperature,
            } => {
                let d = weights[0].len();
                if state.len() + 1 != d {
                    return Err(Error::DimensionMismatch(format!(
                        "state length {} for weights of width {d}",
                        state.len()
                    )));
                }
                let logits = weights.iter().map(|w| {
                    w[..d - 1]
                        .iter()
                        .zip(state)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        + w[d - 1]
                });
                Ok(softmax(logits, *temperature))
            }
            Policy::DeterministicMap { map, num_actions } => {
                let s = state_index(state)?;
                let a = *map.get(s).ok_or_else(|| {
                    Error::DimensionMismatch(format!("state {s} outside deterministic map"))
                })?;
                let mut p = vec![0.0; *num_actions];
                p[a] = 1.0;
                Ok(p)
            }
            Policy::UniformRandom { num_actions } => {
                Ok(vec![1.0 / *num_actions as f64; *num_actions])
            }
        }
    }

    pub fn action_prob(&self, state: &[f64], action: &Action) -> Result<f64> {
        let a = match action {
            Action::Discrete(a) => *a,
            Action::Continuous(_) => {
                return Err(Error::Unsupported(
                    "probability query for a continuous action".into(),
                ))
            }
        };
        if let Policy::UniformRandom { num_actions } = self {
            if a >= *num_actions {
                return Err(Error::DimensionMismatch(format!("action {a} out of range")));
            }
            return Ok(1.0 / *num_actions as f64);
        }
        let p = self.action_probs(state)?;
        p.get(a)
            .copied()
            .ok_or_else(|| Error::DimensionMismatch(format!("action {a} out of range")))
    }

    /// Draws an action index together with its probability.
    pub fn sample<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<(usize, f64)> {
        let p = self.action_probs(state)?;
        Ok(sample_categorical(&p, rng))
    }

    /// ε-greedy around `greedy`: softmax logits `ln(1-ε+ε/A)` and `ln(ε/A)`,
    /// or a deterministic map when ε = 0.
    pub fn epsilon_greedy(greedy: &[usize], num_actions: usize, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [0, 1]")));
        }
        if epsilon == 0.0 {
            return Ok(Policy::DeterministicMap {
                map: greedy.to_vec(),
                num_actions,
            });
        }
        let a = num_actions as f64;
        let lo = (epsilon / a).ln();
        let hi = (1.0 - epsilon + epsilon / a).ln();
        let logits = greedy
            .iter()
            .map(|&g| (0..num_actions).map(|j| if j == g { hi } else { lo }).collect())
            .collect();
        Ok(Policy::TabularSoftmax {
            logits,
            temperature: 1.0,
        })
    }

    /// Tabular softmax reproducing a strictly positive probability table.
    pub fn from_prob_table(table: &[Vec<f64>]) -> Result<Self> {
        if table.iter().flatten().any(|p| !(*p > 0.0)) {
            return Err(Error::InvalidArgument(
                "probability table must be strictly positive".into(),
            ));
        }
        Ok(Policy::TabularSoftmax {
            logits: table
                .iter()
                .map(|row| row.iter().map(|p| p.ln()).collect())
                .collect(),
            temperature: 1.0,
        })
    }

    /// Per-state action table of a policy over the listed states.
    pub fn prob_table(&self, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        states.iter().map(|s| self.action_probs(s)).collect()
    }
}

/// Per-step mixture `Σ_k w_k π_k(a|s)` over tabular states, as a softmax table.
pub fn markov_mixture(components: &[(f64, &Policy)], num_states: usize) -> Result<Policy> {
    let total: f64 = components.iter().map(|c| c.0).sum();
    if components.is_empty() || components.iter().any(|c| !(c.0 >= 0.0)) || !(total > 0.0) {
        return Err(Error::InvalidArgument("mixture weights must be non-negative".into()));
    }
    let mut table = Vec::with_capacity(num_states);
    for s in 0..num_states {
        let state = [s as f64];
        let mut row: Vec<f64> = Vec::new();
        for (w, p) in components {
            let probs = p.action_probs(&state)?;
            if row.is_empty() {
                row = vec![0.0; probs.len()];
            }
            for (r, q) in row.iter_mut().zip(probs) {
                *r += w / total * q;
            }
        }
        table.push(row);
    }
    Policy::from_prob_table(&table)
}

pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> (usize, f64) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return (i, q);
        }
    }
    // rounding left u above the cumulative sum: take the last positive entry
    let i = p.iter().rposition(|&q| q > 0.0).unwrap_or(p.len() - 1);
    (i, p[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spec_examples() {
        let u = Policy::UniformRandom { num_actions: 4 };
        assert_eq!(u.action_prob(&[3.0], &Action::Discrete(2)).unwrap(), 0.25);
        let d = Policy::DeterministicMap {
            map: vec![1, 0],
            num_actions: 2,
        };
        assert_eq!(d.action_prob(&[0.0], &Action::Discrete(1)).unwrap(), 1.0);
        assert_eq!(d.action_prob(&[0.0], &Action::Discrete(0)).unwrap(), 0.0);
        let t = Policy::TabularSoftmax {
            logits: vec![vec![0.3, 0.3]],
            temperature: 0.7,
        };
        assert_eq!(t.action_prob(&[0.0], &Action::Discrete(0)).unwrap(), 0.5);
    }

    #[test]
    fn continuous_query_is_unsupported() {
        let t = Policy::TabularSoftmax {
            logits: vec![vec![0.0, 1.0]],
            temperature: 1.0,
        };
        assert!(matches!(
            t.action_prob(&[0.0], &Action::Continuous(vec![0.2])),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn epsilon_greedy_probabilities() {
        let p = Policy::epsilon_greedy(&[1, 0], 4, 0.2).unwrap();
        let probs = p.action_probs(&[0.0]).unwrap();
        assert!((probs[1] - 0.85).abs() < 1e-12);
        assert!((probs[0] - 0.05).abs() < 1e-12);
        let det = Policy::epsilon_greedy(&[1, 0], 4, 0.0).unwrap();
        assert_eq!(det.action_probs(&[1.0]).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mixture_is_convex_combination() {
        let a = Policy::DeterministicMap {
            map: vec![0, 1],
            num_actions: 2,
        };
        let u = Policy::UniformRandom { num_actions: 2 };
        let m = markov_mixture(&[(3.0, &a), (1.0, &u)], 2).unwrap();
        let p = m.action_probs(&[1.0]).unwrap();
        assert!((p[1] - 0.875).abs() < 1e-12);
    }

    #[test]
    fn sampling_frequencies() {
        let p = Policy::TabularSoftmax {
            logits: vec![vec![0.0, (3.0f64).ln()]],
            temperature: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 40_000;
        let ones = (0..n)
            .filter(|_| p.sample(&[0.0], &mut rng).unwrap().0 == 1)
            .count();
        assert!((ones as f64 / n as f64 - 0.75).abs() < 0.01);
    }

    fn arb_policy() -> impl Strategy<Value = Policy> {
        prop_oneof![
            (1usize..4, 1usize..5, 0.1f64..3.0).prop_flat_map(|(s, a, temp)| {
                prop::collection::vec(prop::collection::vec(-5.0f64..5.0, a), s).prop_map(
                    move |logits| Policy::TabularSoftmax {
                        logits,
                        temperature: temp,
                    },
                )
            }),
            (1usize..5, 1usize..4).prop_flat_map(|(a, d)| {
                prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d + 1), a).prop_map(
                    |weights| Policy::FeaturizedSoftmax {
                        weights,
                        temperature: 1.0,
                    },
                )
            }),
            (1usize..5).prop_map(|n| Policy::UniformRandom { num_actions: n }),
        ]
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(p in arb_policy(), x in prop::collection::vec(-3.0f64..3.0, 3)) {
            let state: Vec<f64> = match &p {
                Policy::FeaturizedSoftmax { weights, .. } => x[..weights[0].len() - 1].to_vec(),
                _ => vec![0.0],
            };
            let probs = p.action_probs(&state).unwrap();
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(probs.iter().all(|q| (0.0..=1.0).contains(q)));
        }

        #[test]
        fn json_round_trip(p in arb_policy()) {
            let back: Policy = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
