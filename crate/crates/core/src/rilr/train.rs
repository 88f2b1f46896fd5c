//! Neighbor-target construction from a frozen latent model and minibatch
//! training of the reconstructor.

use opehf_diff::{AdamConfig, Graph};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{NeighborTargets, Reconstructor};
use super::{ReconstructedDataset, ReconstructionMethod, RilrConfig};
use crate::error::{Error, Result};
use crate::hmdp::{OfflineDataset, Trajectory};
use crate::seed::stage_rng;
use crate::vlmh::{neighbor_lists, LatentEncoding, VlmhModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RilrTrainLog {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Held-out mean loss after each epoch; empty without a held-out split.
    pub heldout_losses: Vec<f64>,
    /// Indices of the held-out trajectories.
    pub heldout: Vec<usize>,
    pub best_epoch: usize,
    pub sigma_sum: f64,
    pub sigma_reg: f64,
}

/// Targets `factor · G_j` of the `k` latent neighbors of every step
/// `(i, t)`, `t < T`. The pool is every step `t' < T` of every other
/// trajectory.
pub fn build_neighbor_targets(
    ds: &OfflineDataset,
    encodings: &[LatentEncoding],
    k: usize,
    factor: f64,
) -> Result<NeighborTargets> {
    let horizon = ds.spec.horizon;
    let pool: Vec<LatentEncoding> = encodings.iter().filter(|e| e.step < horizon).cloned().collect();
    if pool.len() != ds.len() * horizon {
        return Err(Error::Missing("latent encodings for every step".into()));
    }
    let lists = neighbor_lists(&pool, &pool, k)?;
    let mut values = vec![vec![Vec::new(); horizon]; ds.len()];
    for (q, js) in pool.iter().zip(lists) {
        values[q.trajectory][q.step] = js.iter().map(|&j| factor * pool[j].human_return).collect();
    }
    NeighborTargets::from_values(&values)
}

/// End-to-end reconstruction: encode with the frozen model, build neighbor
/// targets, then train.
pub fn train_rilr(
    ds: &OfflineDataset,
    vlmh: &VlmhModel,
    config: &RilrConfig,
) -> Result<(Reconstructor, ReconstructedDataset, RilrTrainLog)> {
    if !vlmh.trained {
        return Err(Error::Untrained);
    }
    let model = Reconstructor::new(ds, config.clone())?;
    let encodings = vlmh.encode_dataset(ds)?;
    let targets = build_neighbor_targets(ds, &encodings, config.neighbors, model.target_factor)?;
    fit(model, ds, &targets)
}

/// Trains on precomputed neighbor targets (one entry per trajectory of `ds`).
pub fn train_rilr_with_targets(
    ds: &OfflineDataset,
    targets: &NeighborTargets,
    config: &RilrConfig,
) -> Result<(Reconstructor, ReconstructedDataset, RilrTrainLog)> {
    let model = Reconstructor::new(ds, config.clone())?;
    fit(model, ds, targets)
}

fn fit(
    mut model: Reconstructor,
    ds: &OfflineDataset,
    targets: &NeighborTargets,
) -> Result<(Reconstructor, ReconstructedDataset, RilrTrainLog)> {
    if targets.mean.len() != ds.len() || targets.k != model.config.neighbors {
        return Err(Error::Missing("neighbor targets matching the dataset and K".into()));
    }
    let cfg = model.config.clone();
    let seed = cfg.seed;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut stage_rng(seed, "rilr-split", 0));
    let n_val = if ds.len() >= 10 {
        ((ds.len() as f64) * cfg.validation_fraction).round() as usize
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut heldout = val_idx.to_vec();
    heldout.sort_unstable();
    let train: Vec<&Trajectory> = train_idx.iter().map(|&i| &ds.trajectories[i]).collect();
    let train_targets = targets.subset(train_idx);
    let val: Vec<&Trajectory> = heldout.iter().map(|&i| &ds.trajectories[i]).collect();
    let val_targets = targets.subset(&heldout);

    let mut best = if val.is_empty() {
        None
    } else {
        Some((model.mean_loss(&val, &val_targets)?, model.params.clone(), 0))
    };
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut heldout_losses = Vec::new();
    let mut lr = cfg.learning_rate;
    let mut iteration = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut perm: Vec<usize> = (0..train.len()).collect();
        perm.shuffle(&mut stage_rng(seed, "rilr-shuffle", epoch as u64));
        let mut total = 0.0;
        for chunk in perm.chunks(cfg.batch_size) {
            let trajs: Vec<&Trajectory> = chunk.iter().map(|&i| train[i]).collect();
            let batch = model.batch(&trajs, Some(&train_targets.subset(chunk)))?;
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let l = model.loss(&mut g, &p, &batch)?;
            let mean = g.mean(l.total);
            let v = g.scalar_value(mean);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("RILR loss at iteration {iteration}")));
            }
            total += v * trajs.len() as f64;
            g.backward(mean)?;
            let mut grads = p.grads(&g);
            grads.clip_norm(100.0);
            model.params.adam_step(
                &grads,
                &AdamConfig {
                    lr,
                    weight_decay: 0.0,
                    ..Default::default()
                },
            )?;
            lr *= cfg.lr_decay;
            iteration += 1;
        }
        let train_loss = total / train.len() as f64;
        epoch_losses.push(train_loss);
        if let Some((best_loss, best_params, best_epoch)) = best.as_mut() {
            let v = model.mean_loss(&val, &val_targets)?;
            heldout_losses.push(v);
            if v < *best_loss {
                *best_loss = v;
                *best_params = model.params.clone();
                *best_epoch = epoch;
            }
        }
        log::debug!("rilr epoch {epoch}: train {train_loss:.5}");
    }
    let best_epoch = match best {
        Some((_, params, epoch)) => {
            model.params = params;
            epoch
        }
        None => cfg.epochs,
    };
    let ihrs = model.reconstruct(ds)?;
    let rec = ReconstructedDataset::new(ds.clone(), ihrs, ReconstructionMethod::Rilr)?;
    let log = RilrTrainLog {
        epoch_losses,
        heldout_losses,
        heldout,
        best_epoch,
        sigma_sum: model.sigma_sum,
        sigma_reg: model.sigma_reg,
    };
    Ok((model, rec, log))
}
