use std::cell::{Ref, RefCell};

use crate::functional::{focal_bce, focal_bce_grad, gelu, gelu_grad, softmax_in_place};
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Cosine {
        a: Var,
        b: Var,
        norms: Vec<f64>,
        norm_b: f64,
    },
    Clamp(Var, f64, f64),
    Focal {
        p: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    Mean(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations. Build a forward pass with the methods below, then call
/// [`Graph::backward`] on a scalar output.
///
/// Nodes whose inputs are all constants are never visited on the way back,
/// so frozen weights cost a forward pass only.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable input.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&self, t: Tensor, trainable: bool) -> Var {
        self.push(t, Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var {
        let value = f(&self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> Tensor, op: Op) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            f(&va, &vb)
        };
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.matmul(y), Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, Tensor::transpose, Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip_map(y, |p, q| p + q), Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip_map(y, |p, q| p - q), Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip_map(y, |p, q| p * q), Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.binary(
            a,
            row,
            |x, r| {
                assert_eq!(r.rows(), 1, "add_row expects a single row");
                assert_eq!(r.cols(), x.cols(), "add_row width mismatch");
                let mut out = x.clone();
                for i in 0..out.rows() {
                    for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                        *o += b;
                    }
                }
                out
            },
            Op::AddRow(a, row),
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x.map(|v| v * s), Op::Scale(a, s))
    }

    /// Adds a constant tensor (masks, biases that are not trained).
    pub fn shift(&self, a: Var, c: &Tensor) -> Var {
        self.unary(a, |x| x.zip_map(c, |p, q| p + q), Op::Shift(a))
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(gelu), Op::Gelu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(crate::functional::sigmoid), Op::Sigmoid(a))
    }

    /// Row-wise softmax. Entries at `-inf` receive zero weight.
    pub fn softmax_rows(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let mut out = x.clone();
                for r in 0..out.rows() {
                    softmax_in_place(out.row_mut(r));
                }
                out
            },
            Op::Softmax(a),
        )
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (value, xhat, inv_std) = {
            let xv = self.value(x);
            let g = self.value(gamma);
            let b = self.value(beta);
            let (rows, cols) = xv.shape();
            assert_eq!(g.shape(), (1, cols), "layer_norm gamma shape");
            assert_eq!(b.shape(), (1, cols), "layer_norm beta shape");
            let mut xhat = Tensor::zeros(rows, cols);
            let mut out = Tensor::zeros(rows, cols);
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = xv.row(r);
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for c in 0..cols {
                    let h = (row[c] - mean) * is;
                    xhat.set(r, c, h);
                    out.set(r, c, h * g.data()[c] + b.data()[c]);
                }
            }
            (out, xhat, inv_std)
        };
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        self.unary(a, |x| x.clone().reshape(rows, cols), Op::Reshape(a))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| self.value(*p)).collect();
            let refs: Vec<&Tensor> = vals.iter().map(|r| &**r).collect();
            Tensor::vstack(&refs)
        };
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| self.value(*p)).collect();
            let rows = vals.first().map_or(0, |t| t.rows());
            let cols: usize = vals.iter().map(|t| t.cols()).sum();
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let mut off = 0;
                for t in &vals {
                    assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                    out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
                    off += t.cols();
                }
            }
            out
        };
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(
            a,
            |x| {
                assert!(start + len <= x.cols(), "slice_cols out of range");
                let mut out = Tensor::zeros(x.rows(), len);
                for r in 0..x.rows() {
                    out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
                }
                out
            },
            Op::SliceCols(a, start),
        )
    }

    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        self.unary(
            a,
            |x| {
                let mut out = Tensor::zeros(indices.len(), x.cols());
                for (i, &r) in indices.iter().enumerate() {
                    out.row_mut(i).copy_from_slice(x.row(r));
                }
                out
            },
            Op::GatherRows(a, indices.to_vec()),
        )
    }

    /// Cosine similarity of each row of `a` with the single row `b`; `m x 1`.
    ///
    /// Panics on zero-norm inputs; callers check norms first.
    pub fn cosine_rows(&self, a: Var, b: Var) -> Var {
        let (value, norms, norm_b) = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(vb.rows(), 1, "cosine_rows expects a single reference row");
            assert_eq!(va.cols(), vb.cols(), "cosine_rows width mismatch");
            let nb = norm(vb.data());
            assert!(nb > 0.0, "cosine with zero-norm reference");
            let mut out = Tensor::zeros(va.rows(), 1);
            let mut norms = Vec::with_capacity(va.rows());
            for r in 0..va.rows() {
                let na = norm(va.row(r));
                assert!(na > 0.0, "cosine with zero-norm row {r}");
                norms.push(na);
                out.set(r, 0, dot(va.row(r), vb.data()) / (na * nb));
            }
            (out, norms, nb)
        };
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Cosine { a, b, norms, norm_b }, rg)
    }

    /// Clamp with a straight-through gradient: 1 inside `[lo, hi]`, 0 outside.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.map(|v| v.clamp(lo, hi)), Op::Clamp(a, lo, hi))
    }

    /// Elementwise binary focal loss of probabilities `p` against 0/1 targets.
    pub fn focal_bce(&self, p: Var, targets: &[f64], alpha: f64, gamma: f64) -> Var {
        self.unary(
            p,
            |x| {
                assert_eq!(x.len(), targets.len(), "focal targets length mismatch");
                let data = x.data().iter().zip(targets).map(|(&p, &y)| focal_bce(p, y, alpha, gamma)).collect();
                Tensor::from_vec(x.rows(), x.cols(), data)
            },
            Op::Focal {
                p,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        self.unary(a, |x| Tensor::scalar(x.sum() / x.len() as f64), Op::Mean(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |x| Tensor::scalar(x.sum()), Op::Sum(a))
    }

    /// `x · w + b` with `w` stored as `in x out`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                }
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        let mut da = Tensor::zeros(val(*a).rows(), val(*a).cols());
                        gemm(&dy, false, val(*b), true, &mut da, 0.0);
                        acc(&mut grads, &nodes, *a, da);
                    }
                    if needs(*b) {
                        let mut db = Tensor::zeros(val(*b).rows(), val(*b).cols());
                        gemm(val(*a), true, &dy, false, &mut db, 0.0);
                        acc(&mut grads, &nodes, *b, db);
                    }
                }
                Op::Transpose(a) => acc(&mut grads, &nodes, *a, dy.transpose()),
                Op::Add(a, b) => {
                    if needs(*b) {
                        acc(&mut grads, &nodes, *b, dy.clone());
                    }
                    acc(&mut grads, &nodes, *a, dy);
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        acc(&mut grads, &nodes, *b, dy.map(|v| -v));
                    }
                    acc(&mut grads, &nodes, *a, dy);
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(&mut grads, &nodes, *a, dy.zip_map(val(*b), |g, y| g * y));
                    }
                    if needs(*b) {
                        acc(&mut grads, &nodes, *b, dy.zip_map(val(*a), |g, x| g * x));
                    }
                }
                Op::AddRow(a, r) => {
                    if needs(*r) {
                        let mut dr = Tensor::zeros(1, dy.cols());
                        for row in 0..dy.rows() {
                            for (d, g) in dr.data_mut().iter_mut().zip(dy.row(row)) {
                                *d += g;
                            }
                        }
                        acc(&mut grads, &nodes, *r, dr);
                    }
                    acc(&mut grads, &nodes, *a, dy);
                }
                Op::Scale(a, s) => acc(&mut grads, &nodes, *a, dy.map(|g| g * s)),
                Op::Shift(a) => acc(&mut grads, &nodes, *a, dy),
                Op::Gelu(a) => acc(&mut grads, &nodes, *a, dy.zip_map(val(*a), |g, x| g * gelu_grad(x))),
                Op::Sigmoid(a) => acc(&mut grads, &nodes, *a, dy.zip_map(&node.value, |g, y| g * y * (1.0 - y))),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), dy.row(r));
                        let inner = dot(yr, gr);
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = yr[c] * (gr[c] - inner);
                        }
                    }
                    acc(&mut grads, &nodes, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let g = val(*gamma);
                    let (rows, cols) = xhat.shape();
                    if needs(*gamma) || needs(*beta) {
                        let mut dg = Tensor::zeros(1, cols);
                        let mut db = Tensor::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                dg.data_mut()[c] += dy.get(r, c) * xhat.get(r, c);
                                db.data_mut()[c] += dy.get(r, c);
                            }
                        }
                        acc(&mut grads, &nodes, *gamma, dg);
                        acc(&mut grads, &nodes, *beta, db);
                    }
                    if needs(*x) {
                        let n = cols as f64;
                        let mut dx = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            let dh: Vec<f64> = (0..cols).map(|c| dy.get(r, c) * g.data()[c]).collect();
                            let sum_dh: f64 = dh.iter().sum();
                            let sum_dh_h: f64 = dh.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                let v = inv_std[r] / n * (n * dh[c] - sum_dh - xhat.get(r, c) * sum_dh_h);
                                dx.set(r, c, v);
                            }
                        }
                        acc(&mut grads, &nodes, *x, dx);
                    }
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut grads, &nodes, *a, dy.reshape(r, c));
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = val(*p).shape();
                        if needs(*p) {
                            let slice = dy.data()[off * c..(off + r) * c].to_vec();
                            acc(&mut grads, &nodes, *p, Tensor::from_vec(r, c, slice));
                        }
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = val(*p).shape();
                        if needs(*p) {
                            let mut g = Tensor::zeros(r, c);
                            for row in 0..r {
                                g.row_mut(row).copy_from_slice(&dy.row(row)[off..off + c]);
                            }
                            acc(&mut grads, &nodes, *p, g);
                        }
                        off += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut g = Tensor::zeros(r, c);
                    let len = dy.cols();
                    for row in 0..r {
                        g.row_mut(row)[*start..*start + len].copy_from_slice(dy.row(row));
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut g = Tensor::zeros(r, c);
                    for (i, &src) in idx.iter().enumerate() {
                        for (d, s) in g.row_mut(src).iter_mut().zip(dy.row(i)) {
                            *d += s;
                        }
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Cosine { a, b, norms, norm_b } => {
                    let (va, vb) = (val(*a), val(*b));
                    let cos = &node.value;
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    let mut db = Tensor::zeros(1, vb.cols());
                    for r in 0..va.rows() {
                        let g = dy.get(r, 0);
                        let c = cos.get(r, 0);
                        let (na, nb) = (norms[r], *norm_b);
                        for j in 0..va.cols() {
                            let ar = va.get(r, j);
                            let bj = vb.data()[j];
                            da.set(r, j, g * (bj / (na * nb) - c * ar / (na * na)));
                            db.data_mut()[j] += g * (ar / (na * nb) - c * bj / (nb * nb));
                        }
                    }
                    if needs(*a) {
                        acc(&mut grads, &nodes, *a, da);
                    }
                    if needs(*b) {
                        acc(&mut grads, &nodes, *b, db);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let g = dy.zip_map(val(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 });
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Focal {
                    p,
                    targets,
                    alpha,
                    gamma,
                } => {
                    let pv = val(*p);
                    let data = pv
                        .data()
                        .iter()
                        .zip(targets)
                        .zip(dy.data())
                        .map(|((&p, &y), &g)| g * focal_bce_grad(p, y, *alpha, *gamma))
                        .collect();
                    acc(&mut grads, &nodes, *p, Tensor::from_vec(pv.rows(), pv.cols(), data));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    let g = dy.item() / (r * c) as f64;
                    acc(&mut grads, &nodes, *a, Tensor::filled(r, c, g));
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut grads, &nodes, *a, Tensor::filled(r, c, dy.item()));
                }
            }
        }
        Gradients { grads }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
