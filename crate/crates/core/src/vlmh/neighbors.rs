//! K-nearest latent neighbors under the SNE similarity
//! `exp(−‖z_q − z_j‖² / (2σ_b²))`. The kernel is monotone in the squared
//! distance, so ranking is done on distances directly and does not depend on
//! the bandwidth.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stage_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentEncoding {
    pub trajectory: usize,
    pub step: usize,
    /// Posterior mean of `z_step`.
    pub mean: Vec<f64>,
    pub human_return: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn sne_similarity(a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * bandwidth * bandwidth)).exp()
}

/// Median pairwise distance over at most 2,048 pool entries drawn from the
/// stream `(seed, "bandwidth", 0)`.
pub fn median_bandwidth(pool: &[LatentEncoding], seed: u64) -> Result<f64> {
    if pool.len() < 2 {
        return Err(Error::PoolTooSmall {
            need: 2,
            have: pool.len(),
        });
    }
    let mut rng = stage_rng(seed, "bandwidth", 0);
    let m = pool.len().min(2048);
    let mut idx = rand::seq::index::sample(&mut rng, pool.len(), m).into_vec();
    idx.sort_unstable();
    let mut d = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push(sq_dist(&pool[idx[i]].mean, &pool[idx[j]].mean).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    Ok(if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    })
}

type Key = (f64, usize, usize, usize);

fn key_cmp(a: &Key, b: &Key) -> Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

/// Indices into `pool` of the `k` most similar entries to `query` outside
/// the query's own trajectory; ties go to the lower trajectory, then the
/// lower step.
pub fn latent_neighbors(pool: &[LatentEncoding], query: &LatentEncoding, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    let mut best: Vec<Key> = Vec::with_capacity(k + 1);
    let mut eligible = 0;
    for (j, e) in pool.iter().enumerate() {
        if e.trajectory == query.trajectory {
            continue;
        }
        eligible += 1;
        let key = (sq_dist(&query.mean, &e.mean), e.trajectory, e.step, j);
        if best.len() == k && key_cmp(&key, &best[k - 1]) != Ordering::Less {
            continue;
        }
        let pos = best
            .binary_search_by(|b| key_cmp(b, &key))
            .unwrap_or_else(|p| p);
        best.insert(pos, key);
        best.truncate(k);
    }
    if eligible < k {
        return Err(Error::PoolTooSmall { need: k, have: eligible });
    }
    Ok(best.into_iter().map(|b| b.3).collect())
}

/// Neighbor lists for every query, computed in parallel.
pub fn neighbor_lists(pool: &[LatentEncoding], queries: &[LatentEncoding], k: usize) -> Result<Vec<Vec<usize>>> {
    queries
        .par_iter()
        .map(|q| latent_neighbors(pool, q, k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn enc(trajectory: usize, step: usize, mean: Vec<f64>) -> LatentEncoding {
        LatentEncoding {
            trajectory,
            step,
            mean,
            human_return: 0.0,
        }
    }

    #[test]
    fn nearest_in_one_dimension() {
        let pool = vec![enc(0, 0, vec![0.0]), enc(1, 0, vec![0.1]), enc(2, 0, vec![10.0])];
        let q = enc(0, 0, vec![0.0]);
        assert_eq!(latent_neighbors(&pool, &q, 1).unwrap(), vec![1]);
        let all = latent_neighbors(&pool, &q, 2).unwrap();
        assert_eq!(all, vec![1, 2]);
        assert!(matches!(
            latent_neighbors(&pool, &q, 3),
            Err(Error::PoolTooSmall { need: 3, have: 2 })
        ));
    }

    #[test]
    fn ties_prefer_lower_trajectory_then_step() {
        let pool = vec![enc(3, 1, vec![1.0]), enc(2, 4, vec![1.0]), enc(2, 2, vec![-1.0])];
        let q = enc(0, 0, vec![0.0]);
        assert_eq!(latent_neighbors(&pool, &q, 3).unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn median_bandwidth_of_line() {
        let pool: Vec<_> = (0..3).map(|i| enc(i, 0, vec![i as f64])).collect();
        // distances 1, 1, 2
        assert_eq!(median_bandwidth(&pool, 0).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn sne_ranking_matches_euclidean(
            pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 3..30),
            bw in 0.05f64..10.0,
            k in 1usize..3,
        ) {
            let pool: Vec<_> = pts.iter().enumerate().map(|(i, p)| enc(i + 1, 0, p.clone())).collect();
            let q = enc(0, 0, vec![0.3, -0.2]);
            let got = latent_neighbors(&pool, &q, k).unwrap();
            let mut by_dist: Vec<usize> = (0..pool.len()).collect();
            by_dist.sort_by(|&a, &b| sq_dist(&q.mean, &pool[a].mean).total_cmp(&sq_dist(&q.mean, &pool[b].mean)).then(a.cmp(&b)));
            prop_assert_eq!(&got[..], &by_dist[..k]);
            // similarities are non-increasing along the returned list
            let s: Vec<f64> = got.iter().map(|&j| sne_similarity(&q.mean, &pool[j].mean, bw)).collect();
            prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
