//! Named parameter tensors, Adam optimizer state and checkpoints.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::DiffError;

/// Current on-disk checkpoint layout.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Array2<f64>,
    decay: bool,
}

/// Adam hyperparameters. `weight_decay` is an L2 penalty applied only to
/// parameters registered with `decay = true`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
}

/// All trainable tensors of a model plus their optimizer moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: Vec<Entry>,
    adam: AdamState,
}

/// Parameter leaves bound onto one [`Graph`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects the gradients of every parameter after `graph.backward`.
    pub fn grads(&self, graph: &Graph) -> Gradients {
        Gradients(self.vars.iter().map(|v| graph.grad(*v)).collect())
    }
}

/// Per-parameter gradients, indexed like the owning [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Array2<f64>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.0[id.0]
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.0 {
            g.mapv_inplace(|x| x * k);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.0
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales in place so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.l2_norm();
        if n.is_finite() && n > max_norm {
            self.scale(max_norm / n);
        }
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. `decay` marks it for weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>, decay: bool) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value,
            decay,
        });
        self.adam = AdamState::default();
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// Copies every tensor onto `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| graph.leaf(e.value.clone()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.value.iter().all(|x| x.is_finite()))
    }

    /// One bias-corrected Adam update.
    ///
    /// Rejects the whole step (parameters and moments untouched) if any
    /// gradient entry is non-finite.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<(), DiffError> {
        if grads.0.len() != self.entries.len() {
            return Err(DiffError::ShapeMismatch(format!(
                "{} gradients for {} parameters",
                grads.0.len(),
                self.entries.len()
            )));
        }
        for (e, g) in self.entries.iter().zip(&grads.0) {
            if g.dim() != e.value.dim() {
                return Err(DiffError::ShapeMismatch(format!(
                    "gradient {:?} for parameter `{}` {:?}",
                    g.dim(),
                    e.name,
                    e.value.dim()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(DiffError::NonFiniteGradient(e.name.clone()));
            }
        }
        if self.adam.m.len() != self.entries.len() {
            self.adam.m = self
                .entries
                .iter()
                .map(|e| Array2::zeros(e.value.dim()))
                .collect();
            self.adam.v = self.adam.m.clone();
            self.adam.step = 0;
        }
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, e) in self.entries.iter_mut().enumerate() {
            let m = &mut self.adam.m[i];
            let v = &mut self.adam.v[i];
            let wd = if e.decay { cfg.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut e.value)
                .and(m)
                .and(v)
                .and(&grads.0[i])
                .for_each(|w, m, v, &g| {
                    let g = g + wd * *w;
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                });
        }
        if !self.all_finite() {
            return Err(DiffError::NonFiniteParameter);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            tensors: self
                .entries
                .iter()
                .map(|e| TensorRecord {
                    name: e.name.clone(),
                    shape: [e.value.nrows(), e.value.ncols()],
                    decay: e.decay,
                    data: e.value.iter().copied().collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a parameter set from a checkpoint. Optimizer moments start fresh.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, DiffError> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(DiffError::Checkpoint(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        let mut ps = ParameterSet::new();
        for t in &ck.tensors {
            let [r, c] = t.shape;
            let value = Array2::from_shape_vec((r, c), t.data.clone()).map_err(|_| {
                DiffError::Checkpoint(format!(
                    "tensor `{}` has {} values for shape {r}x{c}",
                    t.name,
                    t.data.len()
                ))
            })?;
            ps.add(t.name.clone(), value, t.decay);
        }
        Ok(ps)
    }

    /// Overwrites values from `other`, which must share names and shapes.
    pub fn load_values(&mut self, other: &ParameterSet) -> Result<(), DiffError> {
        if other.entries.len() != self.entries.len() {
            return Err(DiffError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.dim() != b.value.dim() {
                return Err(DiffError::Checkpoint(format!(
                    "tensor `{}` {:?} does not match `{}` {:?}",
                    a.name,
                    a.value.dim(),
                    b.name,
                    b.value.dim()
                )));
            }
            a.value.assign(&b.value);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    #[serde(default)]
    pub decay: bool,
    pub data: Vec<f64>,
}

/// JSON checkpoint of named tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub tensors: Vec<TensorRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one_param(x: f64) -> (ParameterSet, ParamId) {
        let mut ps = ParameterSet::new();
        let id = ps.add("x", array![[x]], false);
        (ps, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [5.0, -0.3, 1e3] {
            let (mut ps, id) = one_param(1.0);
            let cfg = AdamConfig {
                lr: 0.001,
                ..Default::default()
            };
            ps.adam_step(&Gradients(vec![array![[g]]]), &cfg).unwrap();
            let delta = ps.value(id)[[0, 0]] - 1.0;
            assert!(delta.abs() >= 0.0009 && delta.abs() <= 0.001, "{delta}");
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn zero_gradient_is_noop() {
        let (mut ps, id) = one_param(2.5);
        for _ in 0..10 {
            ps.adam_step(&Gradients(vec![array![[0.0]]]), &AdamConfig::default())
                .unwrap();
        }
        assert_eq!(ps.value(id)[[0, 0]], 2.5);
        assert_eq!(ps.step_count(), 10);
    }

    #[test]
    fn converges_on_quadratic() {
        let (mut ps, id) = one_param(0.0);
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        for _ in 0..5000 {
            let x = ps.value(id)[[0, 0]];
            ps.adam_step(&Gradients(vec![array![[2.0 * (x - 3.0)]]]), &cfg)
                .unwrap();
        }
        assert!((ps.value(id)[[0, 0]] - 3.0).abs() < 0.01);
    }

    #[test]
    fn non_finite_gradient_rejected_without_side_effects() {
        let (mut ps, id) = one_param(1.0);
        let err = ps
            .adam_step(&Gradients(vec![array![[f64::NAN]]]), &AdamConfig::default())
            .unwrap_err();
        assert!(matches!(err, DiffError::NonFiniteGradient(ref n) if n == "x"));
        assert_eq!(ps.value(id)[[0, 0]], 1.0);
        assert_eq!(ps.step_count(), 0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut ps = ParameterSet::new();
        ps.add("w", array![[0.1, -2.0], [1.0 / 3.0, 7e-300]], true);
        ps.add("b", array![[4.0]], false);
        let json = serde_json::to_string(&ps.to_checkpoint()).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        let ps2 = ParameterSet::from_checkpoint(&back).unwrap();
        assert_eq!(ps, ps2);
    }

    #[test]
    fn checkpoint_version_checked() {
        let mut ck = ParameterSet::new().to_checkpoint();
        ck.format_version = 99;
        assert!(ParameterSet::from_checkpoint(&ck).is_err());
    }
}
