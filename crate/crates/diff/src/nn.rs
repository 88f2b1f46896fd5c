//! Feed-forward and gated recurrent building blocks.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParameterSet};
use crate::DiffError;

/// Uniform Glorot initialization for a `fan_in × fan_out` block.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }
}

/// `y = x·W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        decay: bool,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), glorot_uniform(rng, in_dim, out_dim), decay);
        let b = ps.add(format!("{name}.b"), Array2::zeros((1, out_dim)), false);
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let xw = g.matmul(x, p.get(self.w));
        g.add_row(xw, p.get(self.b))
    }
}

/// Fully connected stack: hidden layers with an activation, then a linear
/// output layer. Hidden weights are flagged for weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Vec<Linear>,
    pub out: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        hidden_sizes: &[usize],
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut hidden = Vec::with_capacity(hidden_sizes.len());
        let mut prev = in_dim;
        for (i, &h) in hidden_sizes.iter().enumerate() {
            hidden.push(Linear::new(ps, &format!("{name}.h{i}"), prev, h, true, rng));
            prev = h;
        }
        let out = Linear::new(ps, &format!("{name}.out"), prev, out_dim, false, rng);
        Self {
            hidden,
            out,
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.out).in_dim
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for layer in &self.hidden {
            let z = layer.forward(g, p, h);
            h = self.activation.apply(g, z);
        }
        self.out.forward(g, p, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellKind {
    GruStyle,
    LstmStyle,
}

/// Gated recurrent cell. GRU-style keeps a single hidden vector; LSTM-style
/// also carries a memory cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentCell {
    pub kind: CellKind,
    pub in_dim: usize,
    pub hidden: usize,
    w_x: ParamId,
    w_h: ParamId,
    b_x: ParamId,
    b_h: ParamId,
}

/// Hidden state of a [`RecurrentCell`].
#[derive(Debug, Clone, Copy)]
pub struct RecurrentState {
    pub h: Var,
    pub c: Option<Var>,
}

impl RecurrentCell {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParameterSet,
        name: &str,
        kind: CellKind,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let gates = match kind {
            CellKind::GruStyle => 3,
            CellKind::LstmStyle => 4,
        };
        let mut wx = Array2::zeros((in_dim, gates * hidden));
        let mut wh = Array2::zeros((hidden, gates * hidden));
        for k in 0..gates {
            let bx = glorot_uniform(rng, in_dim, hidden);
            let bh = glorot_uniform(rng, hidden, hidden);
            wx.slice_mut(ndarray::s![.., k * hidden..(k + 1) * hidden])
                .assign(&bx);
            wh.slice_mut(ndarray::s![.., k * hidden..(k + 1) * hidden])
                .assign(&bh);
        }
        let mut bias = Array2::zeros((1, gates * hidden));
        if kind == CellKind::LstmStyle {
            // gate order i, f, g, o
            bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        }
        let w_x = ps.add(format!("{name}.w_x"), wx, false);
        let w_h = ps.add(format!("{name}.w_h"), wh, false);
        let b_x = ps.add(format!("{name}.b_x"), bias, false);
        let b_h = ps.add(format!("{name}.b_h"), Array2::zeros((1, gates * hidden)), false);
        Self {
            kind,
            in_dim,
            hidden,
            w_x,
            w_h,
            b_x,
            b_h,
        }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> RecurrentState {
        let h = g.leaf(Array2::zeros((batch, self.hidden)));
        let c = match self.kind {
            CellKind::GruStyle => None,
            CellKind::LstmStyle => Some(g.leaf(Array2::zeros((batch, self.hidden)))),
        };
        RecurrentState { h, c }
    }

    /// Parameter ids in registration order (weights first).
    pub fn params(&self) -> [ParamId; 4] {
        [self.w_x, self.w_h, self.b_x, self.b_h]
    }

    pub fn step(&self, g: &mut Graph, p: &Bound, x: Var, state: RecurrentState) -> RecurrentState {
        let n = self.hidden;
        let gx = g.matmul(x, p.get(self.w_x));
        let gx = g.add_row(gx, p.get(self.b_x));
        let gh = g.matmul(state.h, p.get(self.w_h));
        let gh = g.add_row(gh, p.get(self.b_h));
        match self.kind {
            CellKind::GruStyle => {
                let xr = g.slice_cols(gx, 0, n);
                let xz = g.slice_cols(gx, n, 2 * n);
                let xn = g.slice_cols(gx, 2 * n, 3 * n);
                let hr = g.slice_cols(gh, 0, n);
                let hz = g.slice_cols(gh, n, 2 * n);
                let hn = g.slice_cols(gh, 2 * n, 3 * n);
                let r = g.add(xr, hr);
                let r = g.sigmoid(r);
                let z = g.add(xz, hz);
                let z = g.sigmoid(z);
                let rh = g.mul(r, hn);
                let cand = g.add(xn, rh);
                let cand = g.tanh(cand);
                // h' = cand + z * (h - cand)
                let diff = g.sub(state.h, cand);
                let zd = g.mul(z, diff);
                let h = g.add(cand, zd);
                RecurrentState { h, c: None }
            }
            CellKind::LstmStyle => {
                let pre = g.add(gx, gh);
                let i = g.slice_cols(pre, 0, n);
                let f = g.slice_cols(pre, n, 2 * n);
                let c_in = g.slice_cols(pre, 2 * n, 3 * n);
                let o = g.slice_cols(pre, 3 * n, 4 * n);
                let i = g.sigmoid(i);
                let f = g.sigmoid(f);
                let c_in = g.tanh(c_in);
                let o = g.sigmoid(o);
                let c_prev = state.c.expect("lstm-style state carries a memory cell");
                let keep = g.mul(f, c_prev);
                let write = g.mul(i, c_in);
                let c = g.add(keep, write);
                let tc = g.tanh(c);
                let h = g.mul(o, tc);
                RecurrentState { h, c: Some(c) }
            }
        }
    }
}

fn check_inputs(g: &Graph, cell: &RecurrentCell, inputs: &[Var]) -> Result<usize, DiffError> {
    let first = inputs
        .first()
        .ok_or_else(|| DiffError::ShapeMismatch("empty input sequence".into()))?;
    let rows = g.shape(*first).0;
    for (t, x) in inputs.iter().enumerate() {
        let (r, c) = g.shape(*x);
        if c != cell.in_dim || r != rows {
            return Err(DiffError::ShapeMismatch(format!(
                "step {t}: input {r}x{c}, cell expects {rows}x{}",
                cell.in_dim
            )));
        }
    }
    Ok(rows)
}

/// Unrolls `cell` over `inputs`, returning the hidden vector after each step.
pub fn recurrent_forward(
    cell: &RecurrentCell,
    g: &mut Graph,
    p: &Bound,
    inputs: &[Var],
    init: Option<RecurrentState>,
) -> Result<Vec<Var>, DiffError> {
    let rows = check_inputs(g, cell, inputs)?;
    let mut state = match init {
        Some(s) => {
            let (r, c) = g.shape(s.h);
            if r != rows || c != cell.hidden {
                return Err(DiffError::ShapeMismatch(format!(
                    "initial hidden {r}x{c}, expected {rows}x{}",
                    cell.hidden
                )));
            }
            if (cell.kind == CellKind::LstmStyle) != s.c.is_some() {
                return Err(DiffError::ShapeMismatch(
                    "initial state does not match cell kind".into(),
                ));
            }
            s
        }
        None => cell.zero_state(g, rows),
    };
    let mut out = Vec::with_capacity(inputs.len());
    for x in inputs {
        state = cell.step(g, p, *x, state);
        out.push(state.h);
    }
    Ok(out)
}

/// Forward and backward recurrent passes; output `t` is `[h_fwd_t, h_bwd_t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiRecurrent {
    pub forward: RecurrentCell,
    pub backward: RecurrentCell,
}

impl BiRecurrent {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParameterSet,
        name: &str,
        kind: CellKind,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            forward: RecurrentCell::new(ps, &format!("{name}.fwd"), kind, in_dim, hidden, rng),
            backward: RecurrentCell::new(ps, &format!("{name}.bwd"), kind, in_dim, hidden, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }
}

pub fn bidirectional_forward(
    cell: &BiRecurrent,
    g: &mut Graph,
    p: &Bound,
    inputs: &[Var],
) -> Result<Vec<Var>, DiffError> {
    let fwd = recurrent_forward(&cell.forward, g, p, inputs, None)?;
    let rev: Vec<Var> = inputs.iter().rev().copied().collect();
    let mut bwd = recurrent_forward(&cell.backward, g, p, &rev, None)?;
    bwd.reverse();
    Ok(fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, b)| g.concat_cols(&[f, b]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(ps: &mut ParameterSet) {
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            ps.value_mut(id).fill(0.0);
        }
    }

    #[test]
    fn zero_weights_zero_input_give_zero_hidden() {
        for kind in [CellKind::GruStyle, CellKind::LstmStyle] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut ps = ParameterSet::new();
            let cell = RecurrentCell::new(&mut ps, "c", kind, 3, 4, &mut rng);
            zeroed(&mut ps);
            if kind == CellKind::LstmStyle {
                // keep the forget-gate bias at its default
                let b = ps.value_mut(cell.params()[2]);
                b.slice_mut(ndarray::s![.., 4..8]).fill(1.0);
            }
            let mut g = Graph::new();
            let p = ps.bind(&mut g);
            let xs: Vec<_> = (0..5).map(|_| g.leaf(Array2::zeros((2, 3)))).collect();
            let hs = recurrent_forward(&cell, &mut g, &p, &xs, None).unwrap();
            for h in hs {
                assert!(g.value(h).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn lstm_forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParameterSet::new();
        let cell = RecurrentCell::new(&mut ps, "c", CellKind::LstmStyle, 2, 3, &mut rng);
        let b = ps.value(cell.params()[2]);
        assert!(b.slice(ndarray::s![.., 3..6]).iter().all(|&v| v == 1.0));
        assert!(b.slice(ndarray::s![.., 0..3]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = glorot_uniform(&mut rng, 10, 20);
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(w.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn single_step_bidirectional_is_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParameterSet::new();
        let bi = BiRecurrent::new(&mut ps, "bi", CellKind::LstmStyle, 2, 3, &mut rng);
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let x = g.leaf(ndarray::array![[0.3, -1.2]]);
        let out = bidirectional_forward(&bi, &mut g, &p, &[x]).unwrap();
        assert_eq!(out.len(), 1);
        let f = recurrent_forward(&bi.forward, &mut g, &p, &[x], None).unwrap()[0];
        let b = recurrent_forward(&bi.backward, &mut g, &p, &[x], None).unwrap()[0];
        let v = g.value(out[0]).clone();
        assert_eq!(v.ncols(), 6);
        assert_eq!(v.slice(ndarray::s![.., 0..3]), g.value(f).view());
        assert_eq!(v.slice(ndarray::s![.., 3..6]), g.value(b).view());
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParameterSet::new();
        let cell = RecurrentCell::new(&mut ps, "c", CellKind::GruStyle, 3, 2, &mut rng);
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let x = g.leaf(Array2::zeros((1, 4)));
        assert!(recurrent_forward(&cell, &mut g, &p, &[x], None).is_err());
        assert!(recurrent_forward(&cell, &mut g, &p, &[], None).is_err());
    }
}
