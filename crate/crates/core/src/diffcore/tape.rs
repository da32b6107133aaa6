use std::sync::atomic::{AtomicU64, Ordering};

use super::matrix::Matrix;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
///
/// A `Var` is only meaningful on the tape that created it; passing it to a
/// different tape panics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Relu(usize),
    Abs(usize),
    Exp(usize),
    Softplus(usize),
    Recip(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    GatherRows(usize, Vec<usize>),
    PickCols(usize, Vec<usize>),
    /// Stores `softmax(z / T)`, the local Jacobian row weights.
    LogSumExpRows(usize, Matrix),
    /// Stores the softmax probabilities and labels.
    SoftmaxCrossEntropy(usize, Matrix, Vec<usize>),
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Record of a forward computation, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so operands always precede the
/// nodes that consume them. A tape is built for one forward/backward cycle;
/// `backward` does not mutate it, so calling it twice yields identical
/// gradients.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "Var used on a tape that did not create it");
        v.id
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Differentiable input (parameters, or inputs under test).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.idx(v)].value
    }

    /// Value of a `1 x 1` variable.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    fn unary(&mut self, a: Var, value: Matrix, op: impl FnOnce(usize) -> Op) -> Var {
        let ia = self.idx(a);
        let rg = self.needs(&[ia]);
        self.push(value, op(ia), rg)
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::dim(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(value, Op::MatMul(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.same_shape(ia, ib, "add")?;
        let value = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x + y);
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(value, Op::Add(ia, ib), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.same_shape(ia, ib, "sub")?;
        let value = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x - y);
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(value, Op::Sub(ia, ib), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        self.unary(a, value, |i| Op::Scale(i, k))
    }

    /// Adds the constant `c` to every entry.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.unary(a, value, Op::Shift)
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.unary(a, value, Op::Relu)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.unary(a, value, Op::Abs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.unary(a, value, Op::Exp)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.unary(a, value, Op::Softplus)
    }

    /// Elementwise `1 / x`. Zero entries are rejected.
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.value(a).as_slice().iter().any(|&v| v == 0.0) {
            return Err(Error::DegenerateInput("reciprocal of zero".into()));
        }
        let value = self.value(a).map(|v| 1.0 / v);
        Ok(self.unary(a, value, Op::Recip))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_raw(1, 1, vec![self.value(a).sum()]);
        self.unary(a, value, Op::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let n = m.as_slice().len();
        if n == 0 {
            return Err(Error::Shape("mean of an empty matrix".into()));
        }
        let value = Matrix::from_raw(1, 1, vec![m.sum() / n as f64]);
        Ok(self.unary(a, value, Op::Mean))
    }

    /// Sums each row: `n x k -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::from_raw(
            m.rows(),
            1,
            (0..m.rows()).map(|r| m.row(r).iter().sum()).collect(),
        );
        self.unary(a, value, Op::RowSum)
    }

    /// Adds a `1 x k` bias row to every row of an `n x k` matrix.
    pub fn add_row(&mut self, z: Var, bias: Var) -> Result<Var> {
        let (iz, ib) = (self.idx(z), self.idx(bias));
        let (zm, bm) = (&self.nodes[iz].value, &self.nodes[ib].value);
        if bm.rows() != 1 || bm.cols() != zm.cols() {
            return Err(Error::dim(format!(
                "bias {:?} for matrix {:?}",
                bm.shape(),
                zm.shape()
            )));
        }
        let mut value = zm.clone();
        let k = zm.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bm.as_slice()[i % k];
        }
        let rg = self.needs(&[iz, ib]);
        Ok(self.push(value, Op::AddRow(iz, ib), rg))
    }

    /// Scales row `r` of `z` (`n x k`) by `col[r]` (`col` is `n x 1`).
    pub fn mul_col(&mut self, col: Var, z: Var) -> Result<Var> {
        let (ic, iz) = (self.idx(col), self.idx(z));
        let (cm, zm) = (&self.nodes[ic].value, &self.nodes[iz].value);
        if cm.cols() != 1 || cm.rows() != zm.rows() {
            return Err(Error::dim(format!(
                "column {:?} for matrix {:?}",
                cm.shape(),
                zm.shape()
            )));
        }
        let k = zm.cols();
        let data = zm
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * cm.as_slice()[i / k])
            .collect();
        let value = Matrix::from_raw(zm.rows(), k, data);
        let rg = self.needs(&[ic, iz]);
        Ok(self.push(value, Op::MulCol(ic, iz), rg))
    }

    /// Row gather: output row `i` is input row `indices[i]`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m.rows()) {
            return Err(Error::dim(format!("row index {bad} of {}", m.rows())));
        }
        let value = m.select_rows(indices);
        let idx = indices.to_vec();
        Ok(self.unary(a, value, |i| Op::GatherRows(i, idx)))
    }

    /// Picks entry `(r, cols[r])` from each row: `n x k -> n x 1`.
    pub fn pick_cols(&mut self, z: Var, cols: &[usize]) -> Result<Var> {
        let m = self.value(z);
        if cols.len() != m.rows() {
            return Err(Error::dim(format!("{} picks for {} rows", cols.len(), m.rows())));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= m.cols()) {
            return Err(Error::dim(format!("column {bad} of {}", m.cols())));
        }
        let value = Matrix::from_raw(
            m.rows(),
            1,
            cols.iter().enumerate().map(|(r, &c)| m.get(r, c)).collect(),
        );
        let idx = cols.to_vec();
        Ok(self.unary(z, value, |i| Op::PickCols(i, idx)))
    }

    /// Per row, `T * ln(sum_k exp(z_k / T))`, max-shifted for stability.
    pub fn logsumexp_rows(&mut self, z: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let m = self.value(z);
        let (n, k) = m.shape();
        let mut out = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n * k);
        for r in 0..n {
            let (lse, soft) = lse_and_softmax(m.row(r), temperature);
            out.push(temperature * lse);
            weights.extend(soft);
        }
        let value = Matrix::from_raw(n, 1, out);
        let w = Matrix::from_raw(n, k, weights);
        Ok(self.unary(z, value, |i| Op::LogSumExpRows(i, w)))
    }

    /// Mean over rows of `-ln softmax(z)[label]`.
    pub fn softmax_cross_entropy(&mut self, z: Var, labels: &[usize]) -> Result<Var> {
        let m = self.value(z);
        let (n, k) = m.shape();
        if labels.len() != n {
            return Err(Error::dim(format!("{} labels for {n} rows", labels.len())));
        }
        if n == 0 {
            return Err(Error::Shape("cross-entropy of an empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label {
                label: bad as i64,
                classes: k,
            });
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let (lse, soft) = lse_and_softmax(m.row(r), 1.0);
            total += lse - m.get(r, y);
            probs.extend(soft);
        }
        let value = Matrix::from_raw(1, 1, vec![total / n as f64]);
        let p = Matrix::from_raw(n, k, probs);
        let labels = labels.to_vec();
        Ok(self.unary(z, value, |i| Op::SoftmaxCrossEntropy(i, p, labels)))
    }

    /// Passes the value through and blocks all gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Reverse sweep from a `1 x 1` loss with seed gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss);
        let shape = self.nodes[il].value.shape();
        if shape != (1, 1) {
            return Err(Error::Shape(format!("backward needs a 1x1 loss, got {shape:?}")));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Matrix::from_raw(1, 1, vec![1.0]));

        for id in (0..=il).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |i: usize| &self.nodes[i].value;
        let mut accumulate = |i: usize, contrib: Matrix| {
            if !self.nodes[i].requires_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&contrib),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul(&val(*b).transpose()).expect("shapes checked at record");
                let gb = val(*a).transpose().matmul(g).expect("shapes checked at record");
                accumulate(*a, ga);
                accumulate(*b, gb);
            }
            Op::Add(a, b) => {
                accumulate(*a, g.clone());
                accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(*a, g.clone());
                accumulate(*b, g.scale(-1.0));
            }
            Op::Scale(a, k) => accumulate(*a, g.scale(*k)),
            Op::Shift(a) => accumulate(*a, g.clone()),
            Op::Relu(a) => {
                accumulate(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }))
            }
            Op::Abs(a) => accumulate(
                *a,
                g.zip_map(val(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Exp(a) => accumulate(*a, g.zip_map(&node.value, |gv, e| gv * e)),
            Op::Softplus(a) => accumulate(*a, g.zip_map(val(*a), |gv, x| gv * sigmoid(x))),
            Op::Recip(a) => accumulate(*a, g.zip_map(&node.value, |gv, r| -gv * r * r)),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(*a, Matrix::from_raw(r, c, vec![g.get(0, 0); r * c]));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                let v = g.get(0, 0) / (r * c) as f64;
                accumulate(*a, Matrix::from_raw(r, c, vec![v; r * c]));
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).shape();
                let data = (0..r * c).map(|i| g.as_slice()[i / c]).collect();
                accumulate(*a, Matrix::from_raw(r, c, data));
            }
            Op::AddRow(z, b) => {
                let (r, c) = g.shape();
                let mut gb = vec![0.0; c];
                for row in 0..r {
                    for (acc, v) in gb.iter_mut().zip(g.row(row)) {
                        *acc += v;
                    }
                }
                accumulate(*z, g.clone());
                accumulate(*b, Matrix::from_raw(1, c, gb));
            }
            Op::MulCol(col, z) => {
                let (zm, cm) = (val(*z), val(*col));
                let (r, c) = zm.shape();
                let gcol = (0..r)
                    .map(|i| g.row(i).iter().zip(zm.row(i)).map(|(a, b)| a * b).sum())
                    .collect();
                let gz = (0..r * c).map(|i| g.as_slice()[i] * cm.as_slice()[i / c]).collect();
                accumulate(*col, Matrix::from_raw(r, 1, gcol));
                accumulate(*z, Matrix::from_raw(r, c, gz));
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                let data = ga.data_mut();
                for (out_row, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        data[src * c + j] += g.get(out_row, j);
                    }
                }
                accumulate(*a, ga);
            }
            Op::PickCols(z, cols) => {
                let (r, c) = val(*z).shape();
                let mut gz = Matrix::zeros(r, c);
                let data = gz.data_mut();
                for (row, &col) in cols.iter().enumerate() {
                    data[row * c + col] += g.as_slice()[row];
                }
                accumulate(*z, gz);
            }
            Op::LogSumExpRows(z, w) => {
                let c = w.cols();
                let data = (0..w.as_slice().len())
                    .map(|i| g.as_slice()[i / c] * w.as_slice()[i])
                    .collect();
                accumulate(*z, Matrix::from_raw(w.rows(), c, data));
            }
            Op::SoftmaxCrossEntropy(z, p, labels) => {
                let (n, k) = p.shape();
                let scale = g.get(0, 0) / n as f64;
                let mut gz = p.scale(scale);
                let data = gz.data_mut();
                for (r, &y) in labels.iter().enumerate() {
                    data[r * k + y] -= scale;
                }
                accumulate(*z, gz);
            }
        }
    }
}

/// Gradients from one reverse sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not reach it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        assert_eq!(v.tape, self.tape, "Var from a different tape");
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns zeros of `like`'s shape when absent.
    pub fn wrt(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Returns `ln sum_k exp(z_k / T)` and `softmax(z / T)` for one row.
pub(crate) fn lse_and_softmax(row: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let exps: Vec<f64> = row.iter().map(|&v| (v / temperature - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = max + total.ln();
    (lse, exps.into_iter().map(|e| e / total).collect())
}
