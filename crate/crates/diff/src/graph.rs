//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D array (a minibatch is a stack of rows).
//! Nodes are appended in evaluation order, so the tape index order is already
//! a topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Shape mismatches inside elementary operations are programming errors and
//! panic, the same way `ndarray` does. Boundary functions (recurrent unrolls,
//! Gaussian heads) validate their inputs and return [`DiffError`].

use ndarray::{concatenate, s, Array2, Axis, Zip};

use crate::DiffError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MulConst(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Relu(usize),
    Sum(usize),
    SumCols(usize),
    MeanRows(usize),
    Concat(Vec<usize>),
    Slice(usize, usize, usize),
    BroadcastCols(usize),
}

/// A recorded computation.
///
/// Gradients live next to the values; call [`Graph::zero_grad`] before running
/// a second backward pass over the same tape.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Array2<f64>>,
    grads: Vec<Option<Array2<f64>>>,
    ops: Vec<Op>,
    consts: Vec<Array2<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Adds a leaf holding `value`. Leaves receive gradients like any other node.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Adds a `1×1` leaf.
    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    /// Value of a `1×1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = &self.values[v.0];
        assert_eq!(a.dim(), (1, 1), "scalar_value on non-scalar node");
        a[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].dim()
    }

    /// Gradient of the last backward root with respect to `v`; zeros if `v`
    /// was not reached.
    pub fn grad(&self, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.values[v.0].dim()),
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn binary_same_shape(&self, name: &str, a: Var, b: Var) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{name}: shape mismatch {sa:?} vs {sb:?}");
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].dot(&self.values[b.0]);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape("add", a, b);
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(v, Op::Add(a.0, b.0))
    }

    /// `a (m×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rr, cr) = self.shape(row);
        assert!(rr == 1 && cr == ca, "add_row: {ra}x{ca} + {rr}x{cr}");
        let v = &self.values[a.0] + &self.values[row.0];
        self.push(v, Op::AddRow(a.0, row.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape("sub", a, b);
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape("mul", a, b);
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape("div", a, b);
        let v = &self.values[a.0] / &self.values[b.0];
        self.push(v, Op::Div(a.0, b.0))
    }

    /// Elementwise product with a constant array (no gradient flows to it).
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        assert_eq!(self.shape(a), c.dim(), "mul_const: shape mismatch");
        let v = &self.values[a.0] * &c;
        self.consts.push(c);
        let ci = self.consts.len() - 1;
        self.push(v, Op::MulConst(a.0, ci))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = &self.values[a.0] * k;
        self.push(v, Op::Scale(a.0, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = &self.values[a.0] + k;
        self.push(v, Op::AddScalar(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(softplus);
        self.push(v, Op::Softplus(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::ln);
        self.push(v, Op::Log(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x * x);
        self.push(v, Op::Square(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.values[a.0].sum());
        self.push(v, Op::Sum(a.0))
    }

    /// Row-wise sum, `m×n → m×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.values[a.0].sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a.0))
    }

    /// Mean over rows, `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.values[a.0].nrows() as f64;
        let v = self.values[a.0].sum_axis(Axis(0)).insert_axis(Axis(0)) / m;
        self.push(v, Op::MeanRows(a.0))
    }

    /// Mean of all entries, `1×1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Horizontal concatenation of blocks with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.shape(parts[0]).0;
        for p in parts {
            assert_eq!(self.shape(*p).0, rows, "concat_cols: row mismatch");
        }
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols");
        self.push(v, Op::Concat(parts.iter().map(|p| p.0).collect()))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(start < end && end <= self.shape(a).1, "slice_cols: bad range");
        let v = self.values[a.0].slice(s![.., start..end]).to_owned();
        self.push(v, Op::Slice(a.0, start, end))
    }

    /// Repeats an `m×1` column `n` times, giving `m×n`.
    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Var {
        let (m, c) = self.shape(a);
        assert_eq!(c, 1, "broadcast_cols expects a column");
        let col = self.values[a.0].column(0).to_owned();
        let v = Array2::from_shape_fn((m, n), |(i, _)| col[i]);
        self.push(v, Op::BroadcastCols(a.0))
    }

    fn accumulate(&mut self, idx: usize, delta: Array2<f64>) {
        match &mut self.grads[idx] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Back-propagates from a `1×1` root, populating gradients of every node
    /// the root depends on.
    pub fn backward(&mut self, root: Var) -> Result<(), DiffError> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(DiffError::NonScalarRoot {
                rows: shape.0,
                cols: shape.1,
            });
        }
        self.accumulate(root.0, Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            let op = self.ops[idx].clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = gout.dot(&self.values[b].t());
                    let db = self.values[a].t().dot(&gout);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, gout.clone());
                    self.accumulate(b, gout.clone());
                }
                Op::AddRow(a, r) => {
                    let dr = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(a, gout.clone());
                    self.accumulate(r, dr);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, gout.clone());
                    self.accumulate(b, -&gout);
                }
                Op::Mul(a, b) => {
                    let da = &gout * &self.values[b];
                    let db = &gout * &self.values[a];
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Div(a, b) => {
                    let vb = &self.values[b];
                    let da = &gout / vb;
                    let mut db = Array2::zeros(vb.dim());
                    Zip::from(&mut db)
                        .and(&gout)
                        .and(&self.values[a])
                        .and(vb)
                        .for_each(|d, &g, &x, &y| *d = -g * x / (y * y));
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::MulConst(a, c) => {
                    let da = &gout * &self.consts[c];
                    self.accumulate(a, da);
                }
                Op::Scale(a, k) => self.accumulate(a, &gout * k),
                Op::AddScalar(a) => self.accumulate(a, gout.clone()),
                Op::Tanh(a) => {
                    let mut da = gout.clone();
                    Zip::from(&mut da)
                        .and(&self.values[idx])
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    self.accumulate(a, da);
                }
                Op::Sigmoid(a) => {
                    let mut da = gout.clone();
                    Zip::from(&mut da)
                        .and(&self.values[idx])
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    self.accumulate(a, da);
                }
                Op::Softplus(a) => {
                    let mut da = gout.clone();
                    Zip::from(&mut da)
                        .and(&self.values[a])
                        .for_each(|d, &x| *d *= sigmoid(x));
                    self.accumulate(a, da);
                }
                Op::Exp(a) => {
                    let da = &gout * &self.values[idx];
                    self.accumulate(a, da);
                }
                Op::Log(a) => {
                    let da = &gout / &self.values[a];
                    self.accumulate(a, da);
                }
                Op::Square(a) => {
                    let da = &gout * &self.values[a] * 2.0;
                    self.accumulate(a, da);
                }
                Op::Relu(a) => {
                    let mut da = gout.clone();
                    Zip::from(&mut da)
                        .and(&self.values[a])
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    self.accumulate(a, da);
                }
                Op::Sum(a) => {
                    let g = gout[[0, 0]];
                    let da = Array2::from_elem(self.values[a].dim(), g);
                    self.accumulate(a, da);
                }
                Op::SumCols(a) => {
                    let dim = self.values[a].dim();
                    let da = Array2::from_shape_fn(dim, |(i, _)| gout[[i, 0]]);
                    self.accumulate(a, da);
                }
                Op::MeanRows(a) => {
                    let dim = self.values[a].dim();
                    let m = dim.0 as f64;
                    let da = Array2::from_shape_fn(dim, |(_, j)| gout[[0, j]] / m);
                    self.accumulate(a, da);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.values[p].ncols();
                        let dp = gout.slice(s![.., offset..offset + w]).to_owned();
                        offset += w;
                        self.accumulate(p, dp);
                    }
                }
                Op::Slice(a, start, end) => {
                    let mut da = Array2::zeros(self.values[a].dim());
                    da.slice_mut(s![.., start..end]).assign(&gout);
                    self.accumulate(a, da);
                }
                Op::BroadcastCols(a) => {
                    let da = gout.sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(a, da);
                }
            }
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.scalar(3.0);
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x)[[0, 0]], 6.0);
    }

    #[test]
    fn product_derivative() {
        let mut g = Graph::new();
        let x = g.scalar(2.0);
        let y = g.scalar(5.0);
        let z = g.mul(x, y);
        g.backward(z).unwrap();
        assert_eq!(g.grad(x)[[0, 0]], 5.0);
        assert_eq!(g.grad(y)[[0, 0]], 2.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0]]);
        assert!(matches!(
            g.backward(x),
            Err(DiffError::NonScalarRoot { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = x*x + x  => f' = 2x + 1
        let mut g = Graph::new();
        let x = g.scalar(4.0);
        let sq = g.mul(x, x);
        let f = g.add(sq, x);
        g.backward(f).unwrap();
        assert_eq!(g.grad(x)[[0, 0]], 9.0);
    }

    #[test]
    fn zero_grad_allows_second_pass() {
        let mut g = Graph::new();
        let x = g.scalar(3.0);
        let y = g.square(x);
        g.backward(y).unwrap();
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x)[[0, 0]], 6.0);
    }

    #[test]
    fn unreached_node_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.scalar(1.0);
        let unused = g.scalar(7.0);
        let y = g.exp(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(unused)[[0, 0]], 0.0);
    }

    #[test]
    fn slice_concat_roundtrip_grad() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0, 3.0]]);
        let a = g.slice_cols(x, 0, 1);
        let b = g.slice_cols(x, 1, 3);
        let c = g.concat_cols(&[b, a]);
        let w = g.mul_const(c, array![[1.0, 10.0, 100.0]]);
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), array![[100.0, 1.0, 10.0]]);
    }
}
