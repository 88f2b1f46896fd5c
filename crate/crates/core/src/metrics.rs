//! Accuracy and ranking metrics for estimated policy values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmdp::OfflineDataset;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Mean absolute error over policies.
pub fn mae(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    same_len(estimates, truths)?;
    if estimates.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (e - t).abs())
        .sum::<f64>()
        / estimates.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x, y)?;
    if x.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn rank_correlation(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    same_len(estimates, truths)?;
    pearson(&average_ranks(estimates), &average_ranks(truths))
}

/// `(max_i V_i − V_{argmax_j V̂_j}) / max_i V_i`; argmax ties go to the lowest index.
pub fn regret_at_1(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    same_len(estimates, truths)?;
    if estimates.is_empty() {
        return Err(Error::EmptySequence);
    }
    let best_true = truths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if best_true == 0.0 {
        return Err(Error::ZeroMaxTruth);
    }
    let mut pick = 0;
    for (i, e) in estimates.iter().enumerate() {
        if *e > estimates[pick] {
            pick = i;
        }
    }
    Ok((best_true - truths[pick]) / best_true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnCorrelations {
    pub pearson: f64,
    pub spearman: f64,
}

pub fn return_correlations(env_returns: &[f64], human_returns: &[f64]) -> Result<ReturnCorrelations> {
    Ok(ReturnCorrelations {
        pearson: pearson(env_returns, human_returns)?,
        spearman: rank_correlation(env_returns, human_returns)?,
    })
}

/// Correlations between environmental and human returns of a dataset.
pub fn dataset_return_correlations(ds: &OfflineDataset) -> Result<ReturnCorrelations> {
    return_correlations(&ds.env_returns()?, &ds.human_returns())
}

/// Mean and standard error of the mean.
pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(x: &[f64]) -> f64 {
    let (_, se) = mean_se(x);
    se * se * x.len() as f64
}
