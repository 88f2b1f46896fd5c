//! Minibatch ELBO ascent with Adam, per-iteration learning-rate decay and
//! best-validation checkpoint selection.

use opehf_diff::{AdamConfig, Graph};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::VlmhModel;
use crate::error::{Error, Result};
use crate::hmdp::{OfflineDataset, Trajectory};
use crate::seed::stage_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean minibatch ELBO seen during the epoch.
    pub train_elbo: f64,
    /// Held-out ELBO under fixed noise after the epoch.
    pub validation_elbo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Training-split ELBO under fixed noise before any update.
    pub initial_train_elbo: f64,
    /// Training-split ELBO under the same noise for the kept checkpoint.
    pub final_train_elbo: f64,
    pub epochs: Vec<EpochLog>,
    /// Up to ten best `(epoch, validation ELBO)` pairs, best first.
    pub top_checkpoints: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub iterations: usize,
    pub diverged: bool,
}

/// Trains `model` in place on `ds` and returns the log. Splits, minibatch
/// order and reparameterization noise all derive from `seed`.
pub fn train_vlmh(model: &mut VlmhModel, ds: &OfflineDataset, seed: u64) -> Result<TrainingLog> {
    model.check_spec(&ds.spec)?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let cfg = model.config.clone();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut stage_rng(seed, "vlmh-split", 0));
    let n_val = if ds.len() >= 10 {
        ((ds.len() as f64) * cfg.validation_fraction).round() as usize
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<&Trajectory> = train_idx.iter().map(|&i| &ds.trajectories[i]).collect();
    // With no held-out split, selection falls back to the training data.
    let val: Vec<&Trajectory> = if val_idx.is_empty() {
        train.clone()
    } else {
        val_idx.iter().map(|&i| &ds.trajectories[i]).collect()
    };

    let initial_train_elbo = model.dataset_elbo(&train, seed, "vlmh-train-noise")?;
    let mut best_val = model.dataset_elbo(&val, seed, "vlmh-val-noise")?;
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut top = vec![(0usize, best_val)];
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut iteration = 0usize;
    let mut diverged = false;
    let mut lr = cfg.learning_rate;

    'outer: for epoch in 1..=cfg.epochs {
        let mut perm: Vec<usize> = (0..train.len()).collect();
        perm.shuffle(&mut stage_rng(seed, "vlmh-shuffle", epoch as u64));
        let mut total = 0.0;
        for chunk in perm.chunks(cfg.batch_size) {
            let trajs: Vec<&Trajectory> = chunk.iter().map(|&i| train[i]).collect();
            let batch = model.batch(&trajs)?;
            let noise = model.draw_noise(trajs.len(), &mut stage_rng(seed, "vlmh-noise", iteration as u64));
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let terms = match model.elbo_terms(&mut g, &p, &batch, &noise) {
                Ok(t) => t,
                Err(Error::NonFinite(msg)) => {
                    log::warn!("VLM-H diverged at iteration {iteration}: {msg}");
                    diverged = true;
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            let mean = g.mean(terms.elbo);
            total += g.scalar_value(mean) * trajs.len() as f64;
            let loss = g.neg(mean);
            g.backward(loss)?;
            let mut grads = p.grads(&g);
            grads.clip_norm(cfg.grad_clip);
            let adam = AdamConfig {
                lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            };
            if let Err(e) = model.params.adam_step(&grads, &adam) {
                log::warn!("VLM-H diverged at iteration {iteration}: {e}");
                diverged = true;
                break 'outer;
            }
            iteration += 1;
            lr *= cfg.lr_decay;
        }
        let validation_elbo = match model.dataset_elbo(&val, seed, "vlmh-val-noise") {
            Ok(v) => v,
            Err(Error::NonFinite(msg)) => {
                log::warn!("VLM-H validation diverged after epoch {epoch}: {msg}");
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let train_elbo = total / train.len() as f64;
        log::debug!("vlmh epoch {epoch}: train {train_elbo:.4} validation {validation_elbo:.4}");
        epochs.push(EpochLog {
            epoch,
            train_elbo,
            validation_elbo,
        });
        top.push((epoch, validation_elbo));
        if validation_elbo > best_val {
            best_val = validation_elbo;
            best_params = model.params.clone();
            best_epoch = epoch;
        }
    }
    model.params = best_params;
    top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    top.truncate(10);
    let final_train_elbo = model.dataset_elbo(&train, seed, "vlmh-train-noise")?;
    let log = TrainingLog {
        initial_train_elbo,
        final_train_elbo,
        epochs,
        top_checkpoints: top,
        best_epoch,
        iterations: iteration,
        diverged,
    };
    model.trained = true;
    model.log = Some(log.clone());
    Ok(log)
}
