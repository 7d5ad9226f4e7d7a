use rand::Rng;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Full,
    Scalar,
    Row,
}

impl Bcast {
    #[inline]
    fn at(self, i: usize, cols: usize) -> usize {
        match self {
            Bcast::Full => i,
            Bcast::Scalar => 0,
            Bcast::Row => i % cols,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Softplus,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary {
        kind: Binary,
        lhs: Var,
        rhs: Var,
        lb: Bcast,
        rb: Bcast,
    },
    Scale(Var, F),
    Unary(Unary, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Dropout {
        input: Var,
        mask: Vec<F>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Append-only computation tape.
///
/// Nodes are recorded in evaluation order, which is a topological order, so
/// [`Graph::backward`] walks the tape in reverse. `backward` does not consume
/// the tape; a graph is meant to live for one forward/backward pass. Long
/// inference loops can record shared inputs once and [`Graph::truncate`]
/// back to a mark after each iteration.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `mark` (a previous [`Graph::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() > 2 || bv.shape().len() > 2 || av.cols() != bv.rows() {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![F::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let src = xv.data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    fn broadcast(&self, op: &'static str, lhs: Var, rhs: Var) -> Result<(Bcast, Bcast, Vec<usize>)> {
        let (l, r) = (self.value(lhs), self.value(rhs));
        if l.shape() == r.shape() {
            return Ok((Bcast::Full, Bcast::Full, l.shape().to_vec()));
        }
        if r.numel() == 1 {
            return Ok((Bcast::Full, Bcast::Scalar, l.shape().to_vec()));
        }
        if l.numel() == 1 {
            return Ok((Bcast::Scalar, Bcast::Full, r.shape().to_vec()));
        }
        if r.rows() == 1 && r.cols() == l.cols() {
            return Ok((Bcast::Full, Bcast::Row, l.shape().to_vec()));
        }
        if l.rows() == 1 && l.cols() == r.cols() {
            return Ok((Bcast::Row, Bcast::Full, r.shape().to_vec()));
        }
        Err(Error::shape(op, l.shape(), r.shape()))
    }

    fn binary(&mut self, kind: Binary, lhs: Var, rhs: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (lb, rb, shape) = self.broadcast(name, lhs, rhs)?;
        let (l, r) = (self.value(lhs).data(), self.value(rhs).data());
        let cols = shape.last().copied().unwrap_or(1).max(1);
        let numel: usize = shape.iter().product();
        let f = |a: F, b: F| match kind {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        };
        let out: Vec<F> = if lb == Bcast::Full && rb == Bcast::Full {
            l.iter().zip(r).map(|(&a, &b)| f(a, b)).collect()
        } else {
            (0..numel)
                .map(|i| f(l[lb.at(i, cols)], r[rb.at(i, cols)]))
                .collect()
        };
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(value, Op::Binary { kind, lhs, rhs, lb, rb }, rg))
    }

    /// Elementwise sum; the operands must match exactly, or one of them is a
    /// scalar, or one of them is a single row matching the other's columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::of(s);
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        match kind {
            Unary::Log => {
                if let Some(bad) = xv.data().iter().find(|v| !(**v > F::zero())) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {:?}", bad),
                    });
                }
            }
            Unary::Sqrt => {
                if let Some(bad) = xv.data().iter().find(|v| **v < F::zero()) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: format!("negative input {:?}", bad),
                    });
                }
            }
            _ => {}
        }
        let out = xv
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Softplus => softplus(v),
                Unary::Sigmoid => sigmoid(v),
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
                Unary::Sqrt => v.sqrt(),
            })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Unary(kind, x), rg))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x).expect("softplus is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_finite("softmax", xv)?;
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_finite("log_softmax", xv)?;
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over rows (`axis = 0`, giving `[1, cols]`) or over the last axis
    /// (`axis = 1`, giving `[rows, 1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let d = xv.data();
        let value = match axis {
            0 => {
                let mut out = vec![F::zero(); c];
                for row in d.chunks(c.max(1)) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                Tensor::new(vec![1, c], out)?
            }
            1 => {
                let out = d.chunks(c.max(1)).map(|row| row.iter().copied().sum()).collect();
                Tensor::new(vec![r, 1], out)?
            }
            _ => return Err(Error::Contract(format!("sum_axis: axis {axis} not in {{0, 1}}"))),
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = if axis == 0 { xv.rows() } else { xv.cols() };
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n.max(1) as f64))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(Error::shape("concat", self.value(*first).shape(), self.value(*p).shape()));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![xv.rows(), len], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Slice { input: x, start }, rg))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-column affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != c || bv.numel() != c {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let eps = F::of(LAYER_NORM_EPS);
        let n = F::of(c as f64);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c.max(1)) {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. The identity (the very same node) when `training` is
    /// false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<F> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let out = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Dropout { input: x, mask }, rg))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::Index(format!(
                "embedding_lookup: row {bad} of a {}-row table",
                tv.rows()
            )));
        }
        let value = tv.select_rows(indices);
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    ///
    /// Returns gradients for every leaf that requires them; intermediate
    /// gradients are released as the sweep passes them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads: (0..self.nodes.len()).map(|_| None).collect(),
            });
        }
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.filter(|_| matches!(self.nodes[i].op, Op::Leaf))
                        .map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape"))
                })
                .collect(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); node.value.numel()]))
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(av.data(), g, gb, m, k, n);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Binary { kind, lhs, rhs, lb, rb } => {
                let cols = node.value.cols().max(1);
                let (l, r) = (self.value(*lhs).data(), self.value(*rhs).data());
                if let Some(gl) = self.acc(grads, *lhs) {
                    for (i, &gi) in g.iter().enumerate() {
                        let (li, ri) = (lb.at(i, cols), rb.at(i, cols));
                        let d = match kind {
                            Binary::Add | Binary::Sub => F::one(),
                            Binary::Mul => r[ri],
                            Binary::Div => F::one() / r[ri],
                        };
                        gl[li] = gl[li] + gi * d;
                    }
                }
                if let Some(gr) = self.acc(grads, *rhs) {
                    for (i, &gi) in g.iter().enumerate() {
                        let (li, ri) = (lb.at(i, cols), rb.at(i, cols));
                        let d = match kind {
                            Binary::Add => F::one(),
                            Binary::Sub => -F::one(),
                            Binary::Mul => l[li],
                            Binary::Div => -l[li] / (r[ri] * r[ri]),
                        };
                        gr[ri] = gr[ri] + gi * d;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o = *o + gi * *s;
                    }
                }
            }
            Op::Unary(kind, x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    let two = F::of(2.0);
                    for i in 0..g.len() {
                        let d = match kind {
                            Unary::Softplus => sigmoid(xd[i]),
                            Unary::Sigmoid => y[i] * (F::one() - y[i]),
                            Unary::Exp => y[i],
                            Unary::Log => F::one() / xd[i],
                            Unary::Sqrt => F::one() / (two * y[i]),
                        };
                        gx[i] = gx[i] + g[i] * d;
                    }
                }
            }
            Op::Softmax(x) => {
                let c = node.value.cols().max(1);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((yr, gr), or) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            or[j] = or[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols().max(1);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((yr, gr), or) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let total: F = gr.iter().copied().sum();
                        for j in 0..c {
                            or[j] = or[j] + gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for o in gx.iter_mut() {
                        *o = *o + g[0];
                    }
                }
            }
            Op::SumAxis(x, axis) => {
                let c = self.value(*x).cols().max(1);
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, o) in gx.iter_mut().enumerate() {
                        let gi = if *axis == 0 { g[i % c] } else { g[i / c] };
                        *o = *o + gi;
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if let Some(gp) = self.acc(grads, *p) {
                        for (r, row) in gp.chunks_mut(pc.max(1)).enumerate() {
                            for (j, o) in row.iter_mut().enumerate() {
                                *o = *o + g[r * total + offset + j];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::Slice { input, start } => {
                let len = node.value.cols();
                let c = self.value(*input).cols();
                if let Some(gx) = self.acc(grads, *input) {
                    for (r, gr) in g.chunks(len.max(1)).enumerate() {
                        for (j, &v) in gr.iter().enumerate() {
                            let idx = r * c + start + j;
                            gx[idx] = gx[idx] + v;
                        }
                    }
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols().max(1);
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (i, &gi) in g.iter().enumerate() {
                        gg[i % c] = gg[i % c] + gi * xhat[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % c] = gb[i % c] + gi;
                    }
                }
                if let Some(gx) = self.acc(grads, *input) {
                    let n = F::of(c as f64);
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut sum_d = F::zero();
                        let mut sum_dh = F::zero();
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            sum_d = sum_d + d;
                            sum_dh = sum_dh + d * hr[j];
                        }
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            let v = *is / n * (n * d - sum_d - hr[j] * sum_dh);
                            gx[r * c + j] = gx[r * c + j] + v;
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(gx) = self.acc(grads, *input) {
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o = *o + gi * m;
                    }
                }
            }
            Op::Gather { table, indices } => {
                let c = node.value.cols().max(1);
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &idx) in indices.iter().enumerate() {
                        for j in 0..c {
                            gt[idx * c + j] = gt[idx * c + j] + g[r * c + j];
                        }
                    }
                }
            }
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a leaf; `None` if it does not require gradients or the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn check_finite<F: Real>(op: &'static str, t: &Tensor<F>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            op,
            detail: "non-finite input".into(),
        })
    }
}
