use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed::stage_rng;

/// Standard deviation of `statistic` over `reps` resamples of `0..n` drawn
/// with replacement. Replicate `r` uses the stream `(seed, "bootstrap", r)`.
pub fn bootstrap_se<F>(n: usize, reps: usize, seed: u64, statistic: F) -> Result<f64>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if n == 0 || reps < 2 {
        return Err(Error::InvalidArgument("bootstrap needs data and at least 2 replicates".into()));
    }
    let values = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stage_rng(seed, "bootstrap", r as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            statistic(&idx)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(crate::metrics::sample_variance(&values).sqrt())
}

/// Bootstrap standard error of a mean of per-trajectory terms.
pub fn bootstrap_mean_se(terms: &[f64], reps: usize, seed: u64) -> Result<f64> {
    bootstrap_se(terms.len(), reps, seed, |idx| {
        Ok(idx.iter().map(|&i| terms[i]).sum::<f64>() / idx.len() as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_analytic_se_of_mean() {
        let terms: Vec<f64> = (0..2000).map(|i| ((i * 37) % 101) as f64).collect();
        let (_, se) = crate::metrics::mean_se(&terms);
        let b = bootstrap_mean_se(&terms, 400, 1).unwrap();
        assert!((b / se - 1.0).abs() < 0.15, "bootstrap {b} analytic {se}");
        assert_eq!(b, bootstrap_mean_se(&terms, 400, 1).unwrap());
    }
}
