//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every node on the [`Tape`] holds a 2-D `f64` array. Scalars are `1×1`
//! matrices and row vectors are `1×n`. The operation set is deliberately
//! small: it covers dense layers, the softmax policy head and the PPO
//! surrogate/value losses, and nothing else.

use ndarray::{Array2, Axis, Zip};

use super::NnError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x (n×m) + b (1×m)` with `b` broadcast over rows.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    /// Row-wise log-softmax.
    LogSoftmax(Var),
    /// `out[i, 0] = x[i, idx[i]]`.
    Pick(Var, Vec<usize>),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    Square(Var),
    Mean(Var),
    Sum(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// A recording of a computation, replayed backwards by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`, materialising zeros for unreachable nodes.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(var).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar_value(&self, var: Var) -> f64 {
        self.nodes[var.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, x: Var, op: Op, value: Array2<f64>) -> Var {
        let ng = self.needs(x);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, value: Array2<f64>) -> Var {
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.binary(a, b, Op::MatMul(a, b), value)
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let value = self.value(x) + self.value(bias);
        self.binary(x, bias, Op::AddRow(x, bias), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.binary(a, b, Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.binary(a, b, Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.binary(a, b, Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        self.unary(x, Op::Scale(x, c), value)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.unary(x, Op::Tanh(x), value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.unary(x, Op::Relu(x), value)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        self.unary(x, Op::Exp(x), value)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.unary(x, Op::LogSoftmax(x), value)
    }

    /// Selects one column per row. Panics if `idx` does not match the row count.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let src = self.value(x);
        assert_eq!(src.nrows(), idx.len(), "pick: one index per row");
        let value = Array2::from_shape_fn((idx.len(), 1), |(i, _)| src[[i, idx[i]]]);
        self.unary(x, Op::Pick(x, idx), value)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).mapv(|v| v.clamp(lo, hi));
        self.unary(x, Op::Clamp(x, lo, hi), value)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        Zip::from(&mut value)
            .and(self.value(b))
            .for_each(|v, &w| *v = v.min(w));
        self.binary(a, b, Op::Min(a, b), value)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        self.unary(x, Op::Square(x), value)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        self.unary(x, Op::Mean(x), value)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.unary(x, Op::Sum(x), value)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let shape = self.value(loss).dim();
        if shape != (1, 1) {
            return Err(NnError::NonScalarLoss {
                rows: shape.0,
                cols: shape.1,
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let da = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.needs(*bias) {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, g * *c),
                Op::Tanh(x) => {
                    let dx = &g * &node.value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    Zip::from(&mut dx)
                        .and(self.value(*x))
                        .for_each(|d, &v| {
                            if v <= 0.0 {
                                *d = 0.0;
                            }
                        });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Exp(x) => accumulate(&mut grads, *x, g * &node.value),
                Op::LogSoftmax(x) => {
                    // dx = g - softmax * rowsum(g)
                    let row_sums = g.sum_axis(Axis(1));
                    let mut dx = g;
                    for (r, (mut row, y_row)) in
                        dx.rows_mut().into_iter().zip(node.value.rows()).enumerate()
                    {
                        let s = row_sums[r];
                        Zip::from(&mut row)
                            .and(&y_row)
                            .for_each(|d, &y| *d -= y.exp() * s);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Pick(x, idx) => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    for (row, &col) in idx.iter().enumerate() {
                        dx[[row, col]] += g[[row, 0]];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Clamp(x, lo, hi) => {
                    let mut dx = g;
                    Zip::from(&mut dx)
                        .and(self.value(*x))
                        .for_each(|d, &v| {
                            if v < *lo || v > *hi {
                                *d = 0.0;
                            }
                        });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Min(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.needs(*a) {
                        let mut da = g.clone();
                        Zip::from(&mut da).and(av).and(bv).for_each(|d, &x, &y| {
                            if x > y {
                                *d = 0.0;
                            }
                        });
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = g;
                        Zip::from(&mut db).and(av).and(bv).for_each(|d, &x, &y| {
                            if x <= y {
                                *d = 0.0;
                            }
                        });
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Square(x) => {
                    let dx = &g * &self.value(*x).mapv(|v| 2.0 * v);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Mean(x) => {
                    let dim = self.value(*x).dim();
                    let n = (dim.0 * dim.1) as f64;
                    accumulate(&mut grads, *x, Array2::from_elem(dim, g[[0, 0]] / n));
                }
                Op::Sum(x) => {
                    let dim = self.value(*x).dim();
                    accumulate(&mut grads, *x, Array2::from_elem(dim, g[[0, 0]]));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
