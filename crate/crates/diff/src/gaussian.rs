//! Diagonal Gaussian heads, log-densities, reparameterized sampling and KL.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::nn::{Activation, Mlp};
use crate::params::{Bound, ParameterSet};
use crate::DiffError;

/// Lower bound added to every predicted standard deviation.
pub const STD_FLOOR: f64 = 1e-3;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Mean and standard deviation nodes, each `batch × dim`.
#[derive(Debug, Clone, Copy)]
pub struct GaussParams {
    pub mean: Var,
    pub std: Var,
}

fn check_pair(g: &Graph, p: GaussParams) -> Result<(), DiffError> {
    if g.shape(p.mean) != g.shape(p.std) {
        return Err(DiffError::ShapeMismatch(format!(
            "mean {:?} vs std {:?}",
            g.shape(p.mean),
            g.shape(p.std)
        )));
    }
    if let Some(&s) = g.value(p.std).iter().find(|s| !(**s > 0.0)) {
        return Err(DiffError::NonPositiveStd(s));
    }
    Ok(())
}

/// Row-wise `log N(x; mean, diag(std²))`, returned as `batch × 1`.
pub fn gauss_log_prob(g: &mut Graph, p: GaussParams, x: Var) -> Result<Var, DiffError> {
    check_pair(g, p)?;
    if g.shape(x) != g.shape(p.mean) {
        return Err(DiffError::ShapeMismatch(format!(
            "observation {:?} vs mean {:?}",
            g.shape(x),
            g.shape(p.mean)
        )));
    }
    let dim = g.shape(x).1 as f64;
    let diff = g.sub(x, p.mean);
    let z = g.div(diff, p.std);
    let z2 = g.square(z);
    let quad = g.sum_cols(z2);
    let quad = g.scale(quad, -0.5);
    let log_std = g.ln(p.std);
    let log_std = g.sum_cols(log_std);
    let lp = g.sub(quad, log_std);
    Ok(g.add_scalar(lp, -dim * HALF_LN_2PI))
}

/// `mean + std ⊙ noise`, differentiable in `mean` and `std`.
pub fn gauss_sample_reparam(
    g: &mut Graph,
    p: GaussParams,
    noise: Array2<f64>,
) -> Result<Var, DiffError> {
    check_pair(g, p)?;
    if noise.dim() != g.shape(p.mean) {
        return Err(DiffError::ShapeMismatch(format!(
            "noise {:?} vs mean {:?}",
            noise.dim(),
            g.shape(p.mean)
        )));
    }
    let scaled = g.mul_const(p.std, noise);
    Ok(g.add(p.mean, scaled))
}

/// Row-wise `KL(q || p)` for diagonal Gaussians, summed over dimensions.
pub fn kl_diag_gauss(g: &mut Graph, q: GaussParams, p: GaussParams) -> Result<Var, DiffError> {
    check_pair(g, q)?;
    check_pair(g, p)?;
    if g.shape(q.mean) != g.shape(p.mean) {
        return Err(DiffError::ShapeMismatch(format!(
            "q {:?} vs p {:?}",
            g.shape(q.mean),
            g.shape(p.mean)
        )));
    }
    let dim = g.shape(q.mean).1 as f64;
    // log(σp/σq) + (σq² + (μq−μp)²) / (2σp²) − 1/2
    let ln_p = g.ln(p.std);
    let ln_q = g.ln(q.std);
    let log_ratio = g.sub(ln_p, ln_q);
    let vq = g.square(q.std);
    let dm = g.sub(q.mean, p.mean);
    let dm2 = g.square(dm);
    let num = g.add(vq, dm2);
    let vp = g.square(p.std);
    let frac = g.div(num, vp);
    let frac = g.scale(frac, 0.5);
    let per_dim = g.add(log_ratio, frac);
    let kl = g.sum_cols(per_dim);
    Ok(g.add_scalar(kl, -0.5 * dim))
}

/// Closed-form KL between two diagonal Gaussians given as plain slices.
pub fn kl_diag_gauss_f64(
    mu_q: &[f64],
    std_q: &[f64],
    mu_p: &[f64],
    std_p: &[f64],
) -> Result<f64, DiffError> {
    let n = mu_q.len();
    if std_q.len() != n || mu_p.len() != n || std_p.len() != n {
        return Err(DiffError::ShapeMismatch("kl argument lengths differ".into()));
    }
    let mut kl = 0.0;
    for i in 0..n {
        let (sq, sp) = (std_q[i], std_p[i]);
        if !(sq > 0.0) {
            return Err(DiffError::NonPositiveStd(sq));
        }
        if !(sp > 0.0) {
            return Err(DiffError::NonPositiveStd(sp));
        }
        let d = mu_q[i] - mu_p[i];
        kl += (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5;
    }
    Ok(kl)
}

/// `log N(x; mu, diag(std²))` on plain slices.
pub fn gauss_log_prob_f64(mu: &[f64], std: &[f64], x: &[f64]) -> Result<f64, DiffError> {
    if std.len() != mu.len() || x.len() != mu.len() {
        return Err(DiffError::ShapeMismatch("log_prob argument lengths differ".into()));
    }
    let mut lp = 0.0;
    for i in 0..mu.len() {
        if !(std[i] > 0.0) {
            return Err(DiffError::NonPositiveStd(std[i]));
        }
        let z = (x[i] - mu[i]) / std[i];
        lp += -0.5 * z * z - std[i].ln() - HALF_LN_2PI;
    }
    Ok(lp)
}

/// Inverse of `softplus(raw) + STD_FLOOR`, for pinning a head to a fixed std.
pub fn raw_for_std(std: f64) -> f64 {
    let s = std - STD_FLOOR;
    assert!(s > 0.0, "std must exceed the floor");
    s.exp_m1().ln()
}

/// MLP emitting `[mean, raw]` with `std = softplus(raw) + STD_FLOOR`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussianHead {
    pub net: Mlp,
    pub dim: usize,
}

impl DiagGaussianHead {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            net: Mlp::new(ps, name, in_dim, hidden, 2 * dim, Activation::Tanh, rng),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> GaussParams {
        let out = self.net.forward(g, p, x);
        let mean = g.slice_cols(out, 0, self.dim);
        let raw = g.slice_cols(out, self.dim, 2 * self.dim);
        let sp = g.softplus(raw);
        let std = g.add_scalar(sp, STD_FLOOR);
        GaussParams { mean, std }
    }

    /// Makes the head ignore its input and emit `N(mean, std²)` in every dimension.
    pub fn pin_output(&self, ps: &mut ParameterSet, mean: f64, std: f64) {
        ps.value_mut(self.net.out.w).fill(0.0);
        let raw = raw_for_std(std);
        let b = ps.value_mut(self.net.out.b);
        for j in 0..self.dim {
            b[[0, j]] = mean;
            b[[0, self.dim + j]] = raw;
        }
    }

    /// Zeroes the output layer (mean 0, std `softplus(0) + STD_FLOOR`).
    pub fn zero_output(&self, ps: &mut ParameterSet) {
        ps.value_mut(self.net.out.w).fill(0.0);
        ps.value_mut(self.net.out.b).fill(0.0);
    }
}
