//! Reverse-mode gradients over a recorded tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order of the graph and `backward` is a single reverse sweep.

use indexmap::IndexMap;

use super::tensor::{self as k, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    L2Normalize(Var),
    Dot(Var, Var),
    RowDot(Var, Var),
    Cosine(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Relu(Var),
    PickCols(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by parameter name, in binding order.
pub type Gradients = IndexMap<String, Tensor>;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; receives no gradient in the result.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A trainable input whose gradient is reported under `name`.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.push(t.clone(), Op::Param);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Broadcast-add a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = k::add_row(self.value(a), self.value(row))?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = k::scale(self.value(a), s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::concat(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = k::tanh(self.value(a));
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = k::sigmoid(self.value(a));
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = k::softmax(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise l2 normalization.
    pub fn l2_normalize(&mut self, a: Var, name: &str) -> Result<Var> {
        let out = k::l2_normalize(self.value(a), name)?;
        Ok(self.push(out, Op::L2Normalize(a)))
    }

    /// Flattened dot product of equal-shape operands, as a `1 x 1` tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::dot(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(out), Op::Dot(a, b)))
    }

    /// Per-row dot products, `r x n` with `r x n` to `r x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::row_dot(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::RowDot(a, b)))
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::cosine_similarity(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(out), Op::Cosine(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(out), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(out), Op::Mean(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Select column `cols[r]` from each row `r`, giving an `r x 1` tensor.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if cols.len() != t.rows() || cols.iter().any(|&c| c >= t.cols()) {
            return Err(Error::Shape {
                op: "pick_cols",
                lhs: t.shape(),
                rhs: (cols.len(), 1),
            });
        }
        let data = cols.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        let out = Tensor::new(cols.len(), 1, data)?;
        Ok(self.push(out, Op::PickCols(a, cols.to_vec())))
    }

    /// Gradients of the scalar `loss` with respect to every bound parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let da = k::matmul_nt(&g, self.value(*b))?;
                    let db = k::matmul_tn(self.value(*a), &g)?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, k::scale(&g, -1.0));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = k::mul(&g, self.value(*b))?;
                    let db = k::mul(&g, self.value(*a))?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *row, db);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, k::scale(&g, *s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Concat(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut da = Vec::with_capacity(g.rows() * ca);
                    let mut db = Vec::with_capacity(g.rows() * cb);
                    for r in 0..g.rows() {
                        let row = g.row(r);
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    acc(&mut grads, *a, Tensor::new(g.rows(), ca, da)?);
                    acc(&mut grads, *b, Tensor::new(g.rows(), cb, db)?);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    for (dv, yv) in d.data_mut().iter_mut().zip(y.data()) {
                        *dv *= 1.0 - yv * yv;
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    for (dv, yv) in d.data_mut().iter_mut().zip(y.data()) {
                        *dv *= yv * (1.0 - yv);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let cols = y.cols();
                    let mut d = g;
                    for (drow, yrow) in d
                        .data_mut()
                        .chunks_exact_mut(cols)
                        .zip(y.data().chunks_exact(cols))
                    {
                        let s = k::dot_slices(drow, yrow);
                        for (dv, yv) in drow.iter_mut().zip(yrow) {
                            *dv = yv * (*dv - s);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::L2Normalize(a) => {
                    let x = self.value(*a);
                    let cols = y.cols();
                    let mut d = g;
                    for (r, drow) in d.data_mut().chunks_exact_mut(cols).enumerate() {
                        let xr = x.row(r);
                        let yr = y.row(r);
                        let n = k::dot_slices(xr, xr).sqrt();
                        let s = k::dot_slices(drow, yr);
                        for (dv, yv) in drow.iter_mut().zip(yr) {
                            *dv = (*dv - yv * s) / n;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Dot(a, b) => {
                    let s = g.item();
                    acc(&mut grads, *a, k::scale(self.value(*b), s));
                    acc(&mut grads, *b, k::scale(self.value(*a), s));
                }
                Op::RowDot(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let mut da = vb.clone();
                    let mut db = va.clone();
                    let cols = va.cols();
                    for r in 0..va.rows() {
                        let gr = g.get(r, 0);
                        da.data_mut()[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .for_each(|v| *v *= gr);
                        db.data_mut()[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .for_each(|v| *v *= gr);
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Cosine(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let na = va.norm();
                    let nb = vb.norm();
                    let c = y.item();
                    let s = g.item();
                    let da = Tensor::new(
                        va.rows(),
                        va.cols(),
                        va.data()
                            .iter()
                            .zip(vb.data())
                            .map(|(x, z)| s * (z / (na * nb) - c * x / (na * na)))
                            .collect(),
                    )?;
                    let db = Tensor::new(
                        vb.rows(),
                        vb.cols(),
                        vb.data()
                            .iter()
                            .zip(va.data())
                            .map(|(z, x)| s * (x / (na * nb) - c * z / (nb * nb)))
                            .collect(),
                    )?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    let n = (r * c) as f64;
                    acc(&mut grads, *a, Tensor::filled(r, c, g.item() / n));
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for (dv, xv) in d.data_mut().iter_mut().zip(x.data()) {
                        *dv *= 2.0 * xv;
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for (dv, xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if *xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::PickCols(a, cols) => {
                    let (r, c) = self.value(*a).shape();
                    let mut d = Tensor::zeros(r, c);
                    for (row, &col) in cols.iter().enumerate() {
                        d.data_mut()[row * c + col] = g.get(row, 0);
                    }
                    acc(&mut grads, *a, d);
                }
            }
        }

        let mut out = Gradients::new();
        for (name, v) in &self.params {
            let g = match grads.get_mut(v.0).and_then(Option::take) {
                Some(g) => g,
                None => {
                    let (r, c) = self.value(*v).shape();
                    Tensor::zeros(r, c)
                }
            };
            match out.get_mut(name) {
                Some(existing) => existing.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
